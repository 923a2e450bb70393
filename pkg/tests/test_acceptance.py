"""End-to-end acceptance gate.

One test per shipped claim, each checked against an independent oracle or
a stated tolerance.  The heavy tests (hierarchy speedup at 0.8M entries,
full training) print their headline numbers so a failing margin is
diagnosable from the log.
"""

import json
import math
import time

import numpy as np
import pytest

from narravoc import bench, cli, datagen, embed, genret, index, nn, npe, oov, vocab as vocab_mod
from narravoc.errors import FormatError
from tests.conftest import random_unit_rows
from tests.test_npe import oracle_encode


# 1. vocabulary compression matches a brute-force oracle


def test_01_npe_matches_oracle_on_200_corpora():
    rng = np.random.default_rng(42)
    words = [f"w{i}" for i in range(9)]
    start = time.perf_counter()
    for _ in range(200):
        n = int(rng.integers(0, 40))
        raw = [" ".join(rng.choice(words, size=rng.integers(1, 6))) for _ in range(n)]
        result = npe.encode_corpus(raw)
        texts = [x.text for x in npe.normalize_corpus(raw)]
        bases, suffixes, decomp = oracle_encode(texts)
        assert set(result.prefixes) == bases
        assert set(result.postfixes) == suffixes
        assert result.decomposition == decomp
    elapsed = time.perf_counter() - start
    assert elapsed < 5.0, f"200 corpora took {elapsed:.2f}s"


# 2. exact top-k equals the full-sort oracle, ties broken by ascending id


def test_02_topk_equals_full_sort_oracle():
    rng = np.random.default_rng(7)
    rows = random_unit_rows(10_000, 32, rng)
    rows[5000:5010] = rows[0]  # exact ties
    queries = random_unit_rows(1000, 32, rng)
    for qi, q in enumerate(queries):
        scores = rows @ q
        order = np.lexsort((np.arange(len(rows)), -scores))
        for k in (1, 5, 10):
            got = [r.entry_id for r in index.topk(q, rows, k)]
            assert got == list(order[:k]), f"query {qi}, k={k}"


# 3. hierarchical decode is >= 10x brute force at 0.8M prefixes / 100 scenes


def test_03_hier_speedup_at_scale():
    start = time.perf_counter()
    rep = bench.hier_speedup_bench(
        n_prefixes=800_000, n_scenes=100, dim=64, n_queries=20, threshold=10.0, trials=5
    )
    elapsed = time.perf_counter() - start
    print(f"\nhier speedup: {rep.ratio:.1f}x (threshold 10x), bench took {elapsed:.1f}s")
    assert rep.passed, f"speedup {rep.ratio:.2f}x below 10x"
    assert elapsed < 600.0


# 4. retrieval beats 16-token generative decoding >= 5x; per-token cost is linear


def test_04_retrieval_vs_generative():
    rep = bench.gen_vs_ret_bench(n_queries=30, dim=64)
    ratio = rep["speedup"]["ratio"]
    r2 = rep["per_token_model"]["r2"]
    print(f"\ngenerative/retrieval ratio: {ratio:.1f}x, per-token fit R2={r2:.3f}")
    assert ratio >= 5.0
    assert r2 > 0.95


# 5. gradients check out against finite differences; contrastive loss anchors


def _grad_setup():
    wv = genret.build_word_vocab(["cut a potato", "open a door"])
    cfg = genret.ModelConfig(
        d_model=16, n_layers=1, n_heads=2, d_embed=16, max_visual_tokens=3, max_query_tokens=5, seed=3
    )
    model = genret.GenRetModel(cfg, wv)
    rng = np.random.default_rng(11)
    B = 3
    visual = random_unit_rows(B * 3, 16, rng).reshape(B, 3, 16)
    vis_mask = np.ones((B, 3))
    vis_mask[0, 0] = 0.0  # one padded slot
    ids = np.stack([model.word_vocab.encode(t, 5)[0] for t in ["what is happening?", "cut a potato", "open a door"]])
    qmask = np.stack([model.word_vocab.encode(t, 5)[1] for t in ["what is happening?", "cut a potato", "open a door"]])
    targets = random_unit_rows(B, 16, rng)
    return model, (visual, vis_mask, ids, qmask, targets)


def _loss_of(model, batch) -> float:
    visual, vis_mask, ids, qmask, targets = batch
    t = model.forward_batch(visual, vis_mask, ids, qmask)
    return float(genret.nce_loss(t, targets, tau=0.05).data)


def test_05a_model_gradients_match_finite_differences():
    model, batch = _grad_setup()
    visual, vis_mask, ids, qmask, targets = batch
    t = model.forward_batch(visual, vis_mask, ids, qmask)
    loss = genret.nce_loss(t, targets, tau=0.05)
    loss.backward()
    model64 = model.cast("float64")
    rng = np.random.default_rng(0)
    eps = 1e-5
    checked = 0
    for name, p in model.params.items():
        if p.grad is None:
            continue
        p64 = model64.params[name]
        flat32g = p.grad.reshape(-1)
        flat64 = p64.data.reshape(-1)
        for i in rng.choice(flat64.size, size=min(4, flat64.size), replace=False):
            old = flat64[i]
            flat64[i] = old + eps
            up = _loss_of(model64, batch)
            flat64[i] = old - eps
            down = _loss_of(model64, batch)
            flat64[i] = old
            fd = (up - down) / (2 * eps)
            an = float(flat32g[i])
            if max(abs(fd), abs(an)) < 1e-4:
                continue
            rel = abs(an - fd) / max(abs(fd), abs(an))
            assert rel <= 1e-3, f"{name}[{i}]: analytic {an:.6g} vs fd {fd:.6g} (rel {rel:.2e})"
            checked += 1
    assert checked >= 30, f"only {checked} informative coordinates checked"


def test_05b_float64_gradients_are_tight():
    model, batch = _grad_setup()
    model64 = model.cast("float64")
    visual, vis_mask, ids, qmask, targets = batch
    t = model64.forward_batch(visual, vis_mask, ids, qmask)
    loss = genret.nce_loss(t, targets, tau=0.05)
    loss.backward()
    rng = np.random.default_rng(1)
    eps = 1e-6
    for name in ("w_qkv", "w_vis", "tok_emb", "w_head"):
        key = name if name in model64.params else f"l0.{name}"
        p = model64.params[key]
        flat = p.data.reshape(-1)
        g = p.grad.reshape(-1)
        for i in rng.choice(flat.size, size=5, replace=False):
            old = flat[i]
            flat[i] = old + eps
            up = _loss_of(model64, batch)
            flat[i] = old - eps
            down = _loss_of(model64, batch)
            flat[i] = old
            fd = (up - down) / (2 * eps)
            assert abs(g[i] - fd) <= 1e-6 * max(1.0, abs(fd)), f"{key}[{i}]"


def test_05c_contrastive_loss_anchors():
    rng = np.random.default_rng(5)
    one = random_unit_rows(1, 32, rng)
    assert float(genret.nce_loss(one, one.copy(), tau=0.05).data) == 0.0
    uniform_targets = np.tile(random_unit_rows(1, 32, rng), (32, 1))
    t = random_unit_rows(32, 32, rng)
    loss = float(genret.nce_loss(t, uniform_targets, tau=0.05).data)
    assert abs(loss - math.log(32)) < 1e-6


# 6. training lifts next/before recall over the pooling baseline


@pytest.fixture(scope="module")
def trained_run():
    spec = datagen.WorldSpec(seed=0)
    ds = datagen.make_dataset(spec, n_streams=400)
    enc = embed.make_stub_encoder(spec.dim)
    matrices = {k: embed.build_matrix(ds.world.vocabulary, k, enc).rows for k in ("scene", "prefix", "postfix")}
    wv = genret.build_word_vocab([e.text for e in ds.world.vocabulary.entries])
    model = genret.GenRetModel(genret.ModelConfig(max_visual_tokens=4, seed=0), wv)
    start = time.perf_counter()
    genret.train(model, ds, matrices, epochs=15, seed=0)
    elapsed = time.perf_counter() - start
    return ds, matrices, model, elapsed


def test_06_training_beats_pooling_baseline(trained_run):
    ds, matrices, model, elapsed = trained_run
    trained = genret.evaluate(model, ds, matrices).to_dict()["per_relation"]
    base = genret.baseline_eval(ds, matrices, track="casual").to_dict()["per_relation"]
    print(f"\ntrain took {elapsed:.0f}s")
    for rel in ("current", "next", "before"):
        print(f"  {rel}: trained R@1 {trained[rel]['recall@1']:.3f} vs baseline {base[rel]['recall@1']:.3f}")
    assert elapsed < 600.0
    for rel in ("next", "before"):
        assert trained[rel]["recall@1"] >= base[rel]["recall@1"] + 0.20, rel
    assert trained["current"]["recall@1"] >= base["current"]["recall@1"] - 0.10


# 7. out-of-vocabulary detection and upgrade recover hidden events


def test_07_oov_detection_and_upgrade():
    dim = 64
    spec = datagen.WorldSpec(n_scenes=5, events_per_scene=20, postfix_pool=(), dim=dim, seed=2)
    world = datagen.make_world(spec)
    rng = np.random.default_rng(0)
    hidden: dict[int, list[str]] = {}
    visible_corpus: list[str] = []
    scene_of: dict[str, list[str]] = {}
    for s, scene_events in enumerate(world.events):
        picks = set(rng.choice(len(scene_events), size=2, replace=False))  # hide 10% overall
        hidden[s] = [ev.text for i, ev in enumerate(scene_events) if i in picks]
        for i, ev in enumerate(scene_events):
            if i not in picks:
                visible_corpus.append(ev.text)
                scene_of.setdefault(ev.text, []).append(world.scene_labels[s])
    vocab = vocab_mod.from_npe(npe.encode_corpus(visible_corpus), scene_of)
    enc = embed.make_stub_encoder(dim)
    matrices = {k: embed.build_matrix(vocab, k, enc) for k in ("scene", "prefix", "postfix")}
    snapshot = oov.Snapshot.build(vocab, matrices)
    cfg = oov.UpgradeConfig(threshold=0.4)

    def chain_for(snap, scene_label, clip_emb):
        scene_q = embed.stub_encode_text(scene_label, dim)
        return index.retrieve_chain(scene_q, lambda sid: clip_emb, lambda text: clip_emb, snap.index)

    fired_hidden = total_hidden = fired_visible = total_visible = 0
    for s, scene_events in enumerate(world.events):
        label = world.scene_labels[s]
        for ev in scene_events:
            clip = embed.stub_encode_text(ev.text, dim)  # noiseless clip pool
            fires = oov.detect_oov(chain_for(snapshot, label, clip), cfg)
            if ev.text in hidden[s]:
                total_hidden += 1
                fired_hidden += fires
            else:
                total_visible += 1
                fired_visible += fires
    print(f"\noov fired on {fired_hidden}/{total_hidden} hidden, {fired_visible}/{total_visible} in-vocab")
    assert fired_hidden / total_hidden >= 0.90
    assert fired_visible / total_visible <= 0.05

    describer = oov.StubClient({lab: f"a person works in the {lab}" for lab in world.scene_labels})
    proposer = oov.StubClient(
        {f"a person works in the {world.scene_labels[s]}": "; ".join(hidden[s]) for s in hidden}
    )
    for s in hidden:
        label = world.scene_labels[s]
        for text in hidden[s]:
            clip = embed.stub_encode_text(text, dim)
            chain = chain_for(snapshot, label, clip)
            snapshot, _report = oov.detect_and_upgrade(
                snapshot, chain, describer, proposer, enc, cfg, clip_hint=label
            )

    hits = total = 0
    for s in hidden:
        label = world.scene_labels[s]
        for text in hidden[s]:
            total += 1
            chain = chain_for(snapshot, label, embed.stub_encode_text(text, dim))
            hits += snapshot.vocab.entries[chain.prefix.entry_id].text == text
    print(f"post-upgrade hidden R@1: {hits}/{total}")
    assert hits / total >= 0.90


# 8. the retrieval-token ablation runs all three variants in one command


def test_08_ablation_single_command(tmp_path):
    spec = datagen.WorldSpec(n_scenes=3, events_per_scene=5, postfix_pool=(), frames_per_clip=2, dim=32, seed=4)
    datagen.make_dataset(spec, n_streams=12, len_range=(3, 4)).save(tmp_path / "ds")
    out = tmp_path / "rep" / "ablation.json"
    code = cli.main([
        "bench", "--mode", "ablation", "--data", str(tmp_path / "ds"), "--out", str(out),
        "--d-model", "32", "--epochs", "1",
    ])
    assert code == 0
    report = json.loads(out.read_text())
    inits = [v["ret_init"] for v in report["variants"]]
    assert sorted(inits) == ["eos", "learnable", "pool"]
    for v in report["variants"]:
        assert 0.0 <= v["casual_recall@1"] <= 1.0
    assert (out.parent / "ablation_ablation.png").exists()


# 9. every on-disk artifact round-trips and rejects corruption


def test_09_persistence_roundtrip_and_corruption(tmp_path, tiny_dataset, tiny_matrices):
    vocab = tiny_dataset.world.vocabulary
    vp = tmp_path / "vocab.jsonl"
    vocab_mod.save(vocab, vp)
    loaded = vocab_mod.load(vp)
    assert [(e.id, e.text, e.kind, e.scene_ids) for e in loaded.entries] == [
        (e.id, e.text, e.kind, e.scene_ids) for e in vocab.entries
    ]
    vp.write_text(vp.read_text() + "{bad\n")
    with pytest.raises(FormatError):
        vocab_mod.load(vp)

    mp = tmp_path / "m.nvem"
    embed.save_matrix(tiny_matrices["prefix"], mp)
    assert np.array_equal(embed.load_matrix(mp).rows, tiny_matrices["prefix"].rows)
    raw = bytearray(mp.read_bytes())
    raw[0] ^= 0xFF
    mp.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        embed.load_matrix(mp)

    wv = genret.build_word_vocab(["cut a potato"])
    model = genret.GenRetModel(genret.ModelConfig(d_model=16, n_layers=1, n_heads=2, d_embed=16), wv)
    cp = tmp_path / "m.nvck"
    genret.save_checkpoint(model, cp)
    reloaded = genret.load_checkpoint(cp)
    for k, p in model.params.items():
        assert np.array_equal(p.data, reloaded.params[k].data), k
    cp.write_bytes(cp.read_bytes()[:-9])
    with pytest.raises(FormatError):
        genret.load_checkpoint(cp)

    tiny_dataset.save(tmp_path / "ds")
    ds2 = datagen.Dataset.load(tmp_path / "ds")
    assert ds2.train == tiny_dataset.train and ds2.eval == tiny_dataset.eval


# 10. the timing report decomposes costs and amortizes encoding


def test_10_timing_decomposition_amortizes_encoding():
    rep = bench.decomposition_bench(n_prefixes=20_000, query_counts=(100, 1000, 10_000))
    rows = rep["reports"]
    assert [r["n_queries"] for r in rows] == [100, 1000, 10_000]
    for r in rows:
        assert {"encoding_s", "decoding_s", "upgrading_s", "total_s"} <= set(r)
    enc = [r["encoding_s"] for r in rows]
    dec = [r["decoding_s"] for r in rows]
    print(f"\nencoding_s across N: {[f'{e:.4f}' for e in enc]}, decoding_s: {[f'{d:.4f}' for d in dec]}")
    assert max(enc) < 10 * min(enc), "encoding cost must not scale with query count"
    assert dec[2] > 5 * dec[0], "decoding cost must scale with query count"
