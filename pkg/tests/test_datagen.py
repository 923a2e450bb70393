import numpy as np
import pytest

from narravoc import datagen, embed
from narravoc.errors import TooFewStreams


def test_world_events_unique_and_resolvable(tiny_world):
    texts = [ev.text for scene in tiny_world.events for ev in scene]
    assert len(set(texts)) == len(texts)
    vocab = tiny_world.vocabulary
    for scene in tiny_world.events:
        for ev in scene:
            assert vocab.entries[ev.prefix_id].kind == "prefix"
            assert vocab.entries[ev.prefix_id].text == ev.base_text
            assert vocab.entries[ev.postfix_id].kind == "postfix"
            suffix = vocab.entries[ev.postfix_id].text
            assert ev.text == (ev.base_text if not suffix else f"{ev.base_text} {suffix}")


def test_transitions_are_stochastic(tiny_world):
    for mat in tiny_world.transitions:
        assert np.allclose(mat.sum(axis=1), 1.0)
        assert (mat >= 0).all()


def test_streams_reproducible(tiny_world):
    a = datagen.gen_streams(tiny_world, 4, (3, 5))
    b = datagen.gen_streams(tiny_world, 4, (3, 5))
    for s, t in zip(a, b):
        assert s.scene_idx == t.scene_idx
        assert [c.text for c in s.clips] == [c.text for c in t.clips]
        for c, d in zip(s.clips, t.clips):
            assert np.array_equal(c.frames, d.frames)


def test_stream_invariants(tiny_world):
    for stream in datagen.gen_streams(tiny_world, 8, (3, 5)):
        assert len(stream.clips) >= 2
        for clip in stream.clips:
            assert clip.frames.shape == (tiny_world.spec.frames_per_clip, tiny_world.spec.dim)
            assert np.allclose(np.linalg.norm(clip.frames, axis=1), 1.0, atol=1e-6)
            assert clip.text in {ev.text for ev in tiny_world.events[stream.scene_idx]}


def test_noiseless_clip_pools_to_stub():
    spec = datagen.WorldSpec(n_scenes=2, events_per_scene=3, postfix_pool=(), frame_noise=0.0, dim=32, seed=3)
    world = datagen.make_world(spec)
    for stream in datagen.gen_streams(world, 3, (2, 3)):
        for clip in stream.clips:
            pooled = embed.encode_clip(clip.frames).pooled
            assert np.allclose(pooled, embed.stub_encode_text(clip.text, 32), atol=1e-6)


def test_instruction_counting_oracle(tiny_world):
    streams = datagen.gen_streams(tiny_world, 6, (2, 5))
    samples = datagen.make_instructions(streams, tiny_world)
    expect = sum(3 * len(s.clips) - 1 for s in streams)
    assert len(samples) == expect
    two = [s for s in streams if len(s.clips) == 2]
    if two:
        si = streams.index(two[0])
        mine = [s for s in samples if s.stream_idx == si]
        assert len(mine) == 5  # 2 current + 1 next + 1 before + 1 scene


def test_instruction_span_semantics(tiny_world):
    streams = datagen.gen_streams(tiny_world, 6, (3, 5))
    samples = datagen.make_instructions(streams, tiny_world)
    for s in samples:
        stream = streams[s.stream_idx]
        L = len(stream.clips)
        lo, hi = s.clip_span
        if s.relation == "current":
            assert hi == lo + 1
            assert stream.clips[lo].prefix_id == s.target_id
        elif s.relation == "next":
            assert lo == 0 and hi < L
            assert stream.clips[hi].prefix_id == s.target_id  # span excludes the answer clip
        elif s.relation == "before":
            assert hi == L and lo >= 1
            assert stream.clips[lo - 1].prefix_id == s.target_id
        else:
            assert (lo, hi) == (0, L)
            assert s.target_id == stream.scene_entry_id


def test_split_by_stream_no_leak(tiny_dataset):
    train_streams = {s.stream_idx for s in tiny_dataset.train}
    eval_streams = {s.stream_idx for s in tiny_dataset.eval}
    assert train_streams.isdisjoint(eval_streams)
    assert eval_streams


def test_split_too_few_streams(tiny_world):
    streams = datagen.gen_streams(tiny_world, 3, (2, 3))
    samples = datagen.make_instructions(streams, tiny_world)
    with pytest.raises(TooFewStreams):
        datagen.split(samples)


def test_markov_frequencies_follow_matrix():
    spec = datagen.WorldSpec(n_scenes=1, events_per_scene=4, postfix_pool=(), dim=32, seed=5, frames_per_clip=2)
    world = datagen.make_world(spec)
    streams = datagen.gen_streams(world, 300, (6, 8))
    counts = np.zeros((4, 4))
    for stream in streams:
        for a, b in zip(stream.clips, stream.clips[1:]):
            counts[a.event_idx, b.event_idx] += 1
    rows = counts.sum(axis=1, keepdims=True)
    observed = counts / np.maximum(rows, 1)
    tv = 0.5 * np.abs(observed - world.transitions[0]).sum(axis=1)
    assert tv.max() < 0.05  # successors_per_event=1 makes rows deterministic


def test_dataset_roundtrip(tmp_path, tiny_dataset):
    tiny_dataset.save(tmp_path / "ds")
    loaded = datagen.Dataset.load(tmp_path / "ds")
    assert loaded.train == tiny_dataset.train
    assert loaded.eval == tiny_dataset.eval
    assert len(loaded.streams) == len(tiny_dataset.streams)
    for a, b in zip(loaded.streams, tiny_dataset.streams):
        assert a.scene_entry_id == b.scene_entry_id
        for c, d in zip(a.clips, b.clips):
            assert c.text == d.text
            assert np.allclose(c.frames, d.frames, atol=1e-6)
    va, vb = loaded.world.vocabulary, tiny_dataset.world.vocabulary
    assert [e.text for e in va.entries] == [e.text for e in vb.entries]


def test_spec_validation():
    with pytest.raises(ValueError):
        datagen.WorldSpec(extension_prob=1.5).validate()
    with pytest.raises(ValueError):
        datagen.WorldSpec(frame_noise=-1).validate()
