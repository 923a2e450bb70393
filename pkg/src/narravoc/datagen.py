"""Synthetic world generator: scenes, verb-noun event vocabularies, Markov
event streams, noisy clip embeddings, and instruction-pair construction
with a leak-free train/eval split.

Every sample's correct answer is known by construction, so downstream
recall numbers are always computed against this generative oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import npe, vocab as vocab_mod
from .embed import EmbeddingMatrix, load_matrix, normalize_rows, save_matrix, stub_encode_text
from .errors import FormatError, TooFewStreams
from .vocab import Vocabulary

QUERY_TEXTS = {
    "current": "what is happening?",
    "next": "what's the next action?",
    "before": "what happened before?",
    "scene": "what's the overall activity in this video?",
}

RELATIONS = ("current", "next", "before", "scene")

_SCENE_NAMES = [
    "kitchen", "garden", "garage", "office", "workshop", "bathroom", "bedroom",
    "living room", "laundry room", "balcony", "basement", "studio", "gym",
    "library", "pantry", "hallway", "driveway", "porch", "attic", "shed",
]

_VERBS = [
    "cut", "wash", "open", "close", "lift", "place", "grab", "wipe", "fold",
    "pour", "stir", "shake", "push", "pull", "turn", "press", "hang", "drop",
    "move", "clean", "hold", "scrub", "slice", "peel", "stack", "carry",
    "twist", "tap", "rinse", "sweep",
]

_NOUNS = [
    "potato", "bottle", "door", "box", "towel", "knife", "pan", "shirt",
    "cup", "spoon", "chair", "table", "bag", "book", "plate", "glass",
    "bucket", "rope", "brush", "sponge", "wrench", "screw", "board", "lamp",
    "jar", "lid", "cloth", "basket", "broom", "hose", "plant", "tool",
    "wire", "nail", "pipe", "handle", "tray", "pot", "mat", "bin",
]

DEFAULT_POSTFIX_POOL = (
    "with the left hand",
    "with a knife",
    "on the table",
    "very carefully",
)


@dataclass
class WorldSpec:
    n_scenes: int = 20
    events_per_scene: int = 20
    postfix_pool: tuple[str, ...] = DEFAULT_POSTFIX_POOL
    extension_prob: float = 0.0
    successors_per_event: int = 1  # sparsity of each Markov transition row
    frame_noise: float = 0.1
    frames_per_clip: int = 8
    dim: int = 64
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 <= self.extension_prob <= 1.0):
            raise ValueError("extension_prob must be in [0, 1]")
        if self.frame_noise < 0:
            raise ValueError("frame_noise must be >= 0")
        if self.successors_per_event < 1:
            raise ValueError("successors_per_event must be >= 1")

    def to_dict(self) -> dict:
        return {
            "n_scenes": self.n_scenes,
            "events_per_scene": self.events_per_scene,
            "postfix_pool": list(self.postfix_pool),
            "extension_prob": self.extension_prob,
            "successors_per_event": self.successors_per_event,
            "frame_noise": self.frame_noise,
            "frames_per_clip": self.frames_per_clip,
            "dim": self.dim,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "WorldSpec":
        obj = dict(obj)
        if "postfix_pool" in obj:
            obj["postfix_pool"] = tuple(obj["postfix_pool"])
        return cls(**obj)


@dataclass
class Event:
    text: str  # full narration shown in clips (base, or base + suffix)
    base_text: str
    prefix_id: int = -1
    postfix_id: int = -1


@dataclass
class World:
    spec: WorldSpec
    vocabulary: Vocabulary
    scene_labels: list[str]
    events: list[list[Event]]  # per scene
    transitions: list[np.ndarray]  # per scene, (E, E) rows summing to 1
    scene_entry_ids: list[int] = field(default_factory=list)

    def scene_of_prefix(self, prefix_id: int) -> int:
        return min(self.vocabulary.entries[prefix_id].scene_ids)


@dataclass
class Clip:
    frames: np.ndarray  # (frames_per_clip, dim), unit rows
    text: str
    prefix_id: int
    postfix_id: int
    event_idx: int


@dataclass
class Stream:
    scene_idx: int
    scene_label: str
    scene_entry_id: int
    clips: list[Clip]


@dataclass(frozen=True)
class InstructionSample:
    stream_idx: int
    clip_span: tuple[int, int]  # half-open [start, end)
    relation: str
    query_text: str
    target_id: int  # prefix entry id, or scene entry id for relation="scene"
    target_postfix_id: int


def _scene_label(i: int) -> str:
    return _SCENE_NAMES[i] if i < len(_SCENE_NAMES) else f"scene {i}"


def make_world(spec: WorldSpec) -> World:
    """Synthesize the event vocabulary and Markov dynamics for a world.

    Narrations are unique verb-noun pairs per scene; a fraction
    `extension_prob` get a postfix from the pool.  NPE over the resulting
    corpus yields the world vocabulary, so targets are resolvable through
    its decomposition.
    """
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    n_events = spec.n_scenes * spec.events_per_scene
    combos = [(v, n) for v in _VERBS for n in _NOUNS]
    if n_events > len(combos):
        raise ValueError(f"world too large: at most {len(combos)} distinct events supported")
    picked = rng.choice(len(combos), size=n_events, replace=False)

    scene_labels = [_scene_label(i) for i in range(spec.n_scenes)]
    events: list[list[Event]] = []
    corpus: list[str] = []
    scene_of: dict[str, list[str]] = {}
    k = 0
    for s in range(spec.n_scenes):
        scene_events: list[Event] = []
        for _ in range(spec.events_per_scene):
            verb, noun = combos[picked[k]]
            k += 1
            base = f"{verb} a {noun}"
            text = base
            if spec.postfix_pool and rng.random() < spec.extension_prob:
                suffix = spec.postfix_pool[rng.integers(len(spec.postfix_pool))]
                text = f"{base} {suffix}"
            scene_events.append(Event(text=text, base_text=base))
            corpus.append(base)
            if text != base:
                corpus.append(text)
            scene_of.setdefault(base, []).append(scene_labels[s])
            scene_of.setdefault(text, []).append(scene_labels[s])
        events.append(scene_events)

    result = npe.encode_corpus(corpus)
    vocabulary = vocab_mod.from_npe(result, scene_of)

    post_index = {vocabulary.entries[i].text: i for i in vocabulary.by_kind["postfix"]}
    prefix_index = {vocabulary.entries[i].text: i for i in vocabulary.by_kind["prefix"]}
    for scene_events in events:
        for ev in scene_events:
            ev.prefix_id = prefix_index[ev.base_text]
            if ev.text == ev.base_text:
                ev.postfix_id = vocabulary.empty_postfix_id
            else:
                suffix = ev.text[len(ev.base_text) + 1 :]
                ev.postfix_id = post_index[suffix]

    transitions = []
    for s in range(spec.n_scenes):
        e = spec.events_per_scene
        mat = np.zeros((e, e), dtype=np.float64)
        succ0 = rng.permutation(e)  # primary successor: a random permutation
        weights = np.array([0.7**i for i in range(spec.successors_per_event)])
        weights /= weights.sum()
        for i in range(e):
            succs = [int(succ0[i])]
            while len(succs) < min(spec.successors_per_event, e):
                c = int(rng.integers(e))
                if c not in succs:
                    succs.append(c)
            for j, w in zip(succs, weights[: len(succs)]):
                mat[i, j] = w
            mat[i] /= mat[i].sum()
        transitions.append(mat)

    scene_entry_ids = [vocabulary.find("scene", lab).id for lab in scene_labels]
    return World(
        spec=spec,
        vocabulary=vocabulary,
        scene_labels=scene_labels,
        events=events,
        transitions=transitions,
        scene_entry_ids=scene_entry_ids,
    )


def gen_streams(world: World, n_streams: int, len_range: tuple[int, int] = (4, 8)) -> list[Stream]:
    """Sample event streams from the world's per-scene Markov chains.

    Each clip is `frames_per_clip` noisy copies of its narration's stub
    embedding, renormalized per frame.  Streams use per-stream derived
    seeds, so generation is order-independent and reproducible.
    """
    lo, hi = len_range
    if lo < 2:
        raise ValueError("len_range.min must be >= 2")
    spec = world.spec
    seeds = np.random.SeedSequence(spec.seed).spawn(n_streams + 1)
    streams: list[Stream] = []
    for si in range(n_streams):
        rng = np.random.default_rng(seeds[si + 1])
        scene_idx = int(rng.integers(spec.n_scenes))
        length = int(rng.integers(lo, hi + 1))
        mat = world.transitions[scene_idx]
        ev_idx = int(rng.integers(spec.events_per_scene))
        clips: list[Clip] = []
        for _ in range(length):
            ev = world.events[scene_idx][ev_idx]
            base = stub_encode_text(ev.text, spec.dim)
            frames = base[None, :] + spec.frame_noise * rng.standard_normal((spec.frames_per_clip, spec.dim))
            clips.append(
                Clip(
                    frames=normalize_rows(frames),
                    text=ev.text,
                    prefix_id=ev.prefix_id,
                    postfix_id=ev.postfix_id,
                    event_idx=ev_idx,
                )
            )
            ev_idx = int(rng.choice(spec.events_per_scene, p=mat[ev_idx]))
        streams.append(
            Stream(
                scene_idx=scene_idx,
                scene_label=world.scene_labels[scene_idx],
                scene_entry_id=world.scene_entry_ids[scene_idx],
                clips=clips,
            )
        )
    return streams


def make_instructions(streams: list[Stream], world: World) -> list[InstructionSample]:
    """Expand streams into (span, relation, query, target) samples.

    Per stream of length L: L `current` samples, L-1 `next` samples (span
    is the strict history [0, i)), L-1 `before` samples (span is [i, end),
    target is clip i-1), and one `scene` sample over the full stream.
    """
    samples: list[InstructionSample] = []
    for si, stream in enumerate(streams):
        L = len(stream.clips)
        for i, clip in enumerate(stream.clips):
            samples.append(
                InstructionSample(
                    stream_idx=si,
                    clip_span=(i, i + 1),
                    relation="current",
                    query_text=QUERY_TEXTS["current"],
                    target_id=clip.prefix_id,
                    target_postfix_id=clip.postfix_id,
                )
            )
        for i in range(1, L):
            clip = stream.clips[i]
            samples.append(
                InstructionSample(
                    stream_idx=si,
                    clip_span=(0, i),
                    relation="next",
                    query_text=QUERY_TEXTS["next"],
                    target_id=clip.prefix_id,
                    target_postfix_id=clip.postfix_id,
                )
            )
        for i in range(1, L):
            prev = stream.clips[i - 1]
            samples.append(
                InstructionSample(
                    stream_idx=si,
                    clip_span=(i, L),
                    relation="before",
                    query_text=QUERY_TEXTS["before"],
                    target_id=prev.prefix_id,
                    target_postfix_id=prev.postfix_id,
                )
            )
        samples.append(
            InstructionSample(
                stream_idx=si,
                clip_span=(0, L),
                relation="scene",
                query_text=QUERY_TEXTS["scene"],
                target_id=stream.scene_entry_id,
                target_postfix_id=world.vocabulary.empty_postfix_id,
            )
        )
    return samples


def split(
    samples: list[InstructionSample], ratio: tuple[int, int] = (10, 1), seed: int = 0
) -> tuple[list[InstructionSample], list[InstructionSample]]:
    """Split by stream id so no stream straddles the boundary."""
    stream_ids = sorted({s.stream_idx for s in samples})
    if len(stream_ids) < sum(ratio):
        raise TooFewStreams(f"need at least {sum(ratio)} streams, got {len(stream_ids)}")
    rng = np.random.default_rng(seed)
    shuffled = list(rng.permutation(stream_ids))
    n_eval = max(1, round(len(stream_ids) * ratio[1] / sum(ratio)))
    eval_ids = set(int(i) for i in shuffled[:n_eval])
    train = [s for s in samples if s.stream_idx not in eval_ids]
    evals = [s for s in samples if s.stream_idx in eval_ids]
    return train, evals


@dataclass
class Dataset:
    """Streams + instruction samples ready for training/eval, persistable
    as JSONL with a companion NVEM file of frame embeddings."""

    world: World
    streams: list[Stream]
    train: list[InstructionSample]
    eval: list[InstructionSample]

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        vocab_mod.save(self.world.vocabulary, out / "vocab.jsonl")
        (out / "world_spec.json").write_text(json.dumps(self.world.spec.to_dict(), indent=2))

        all_frames = []
        row = 0
        stream_recs = []
        for stream in self.streams:
            clip_recs = []
            for clip in stream.clips:
                n = clip.frames.shape[0]
                clip_recs.append(
                    {
                        "text": clip.text,
                        "prefix_id": clip.prefix_id,
                        "postfix_id": clip.postfix_id,
                        "event_idx": clip.event_idx,
                        "frame_rows": [row, row + n],
                    }
                )
                all_frames.append(clip.frames)
                row += n
            stream_recs.append(
                {
                    "scene_idx": stream.scene_idx,
                    "scene_label": stream.scene_label,
                    "scene_entry_id": stream.scene_entry_id,
                    "clips": clip_recs,
                }
            )
        with (out / "streams.jsonl").open("w", encoding="utf-8") as f:
            for rec in stream_recs:
                f.write(json.dumps(rec, ensure_ascii=False) + "\n")
        frames = np.concatenate(all_frames) if all_frames else np.zeros((0, self.world.spec.dim), np.float32)
        save_matrix(EmbeddingMatrix(rows=frames), out / "frames.nvem")

        for name, part in (("train", self.train), ("eval", self.eval)):
            with (out / f"{name}.jsonl").open("w", encoding="utf-8") as f:
                for s in part:
                    f.write(
                        json.dumps(
                            {
                                "stream_idx": s.stream_idx,
                                "clip_span": list(s.clip_span),
                                "relation": s.relation,
                                "query_text": s.query_text,
                                "target_id": s.target_id,
                                "target_postfix_id": s.target_postfix_id,
                            }
                        )
                        + "\n"
                    )

    @classmethod
    def load(cls, out_dir: str | Path) -> "Dataset":
        out = Path(out_dir)
        spec = WorldSpec.from_dict(json.loads((out / "world_spec.json").read_text()))
        world = make_world(spec)
        frames = load_matrix(out / "frames.nvem").rows
        streams: list[Stream] = []
        with (out / "streams.jsonl").open("r", encoding="utf-8") as f:
            for line in f:
                rec = json.loads(line)
                clips = []
                for c in rec["clips"]:
                    lo, hi = c["frame_rows"]
                    if hi > frames.shape[0]:
                        raise FormatError("frame row range exceeds companion matrix")
                    clips.append(
                        Clip(
                            frames=frames[lo:hi],
                            text=c["text"],
                            prefix_id=c["prefix_id"],
                            postfix_id=c["postfix_id"],
                            event_idx=c["event_idx"],
                        )
                    )
                streams.append(
                    Stream(
                        scene_idx=rec["scene_idx"],
                        scene_label=rec["scene_label"],
                        scene_entry_id=rec["scene_entry_id"],
                        clips=clips,
                    )
                )

        def read_samples(name: str) -> list[InstructionSample]:
            samples = []
            with (out / f"{name}.jsonl").open("r", encoding="utf-8") as f:
                for line in f:
                    rec = json.loads(line)
                    samples.append(
                        InstructionSample(
                            stream_idx=rec["stream_idx"],
                            clip_span=tuple(rec["clip_span"]),
                            relation=rec["relation"],
                            query_text=rec["query_text"],
                            target_id=rec["target_id"],
                            target_postfix_id=rec["target_postfix_id"],
                        )
                    )
            return samples

        return cls(world=world, streams=streams, train=read_samples("train"), eval=read_samples("eval"))


def make_dataset(
    spec: WorldSpec, n_streams: int = 200, len_range: tuple[int, int] = (4, 8), split_seed: int = 0
) -> Dataset:
    world = make_world(spec)
    streams = gen_streams(world, n_streams, len_range)
    samples = make_instructions(streams, world)
    train, evals = split(samples, seed=split_seed)
    return Dataset(world=world, streams=streams, train=train, eval=evals)
