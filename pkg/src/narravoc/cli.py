"""Command-line entry point.

One binary, subcommand style.  Machine output goes to stdout only when
--json is given; logs always go to stderr.  Exit codes: 0 success, 1
domain error, 2 usage error.  A JSON config file (--config or the
NARRAVOC_CONFIG env var) supplies per-subcommand flag defaults; explicit
flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import datagen as datagen_mod
from . import embed as embed_mod
from . import genret as genret_mod
from . import index as index_mod
from . import npe as npe_mod
from . import oov as oov_mod
from . import vocab as vocab_mod
from .errors import FormatError, NarravocError

log = logging.getLogger("narravoc")

KINDS = ("scene", "prefix", "postfix")


def _emit(args, payload: dict) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2))


def _load_config(argv: list[str]) -> dict:
    path = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif a.startswith("--config="):
            path = a.split("=", 1)[1]
    path = path or os.environ.get("NARRAVOC_CONFIG")
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"config file {path}: {e}") from None
    if not isinstance(cfg, dict):
        raise FormatError(f"config file {path}: expected a JSON object")
    return cfg


def _load_index_dir(d: str | Path):
    d = Path(d)
    vocab = vocab_mod.load(d / "vocab.jsonl")
    matrices = {k: embed_mod.load_matrix(d / f"{k}.nvem", expect_vocab=d / "vocab.jsonl") for k in KINDS}
    idx = index_mod.build(vocab, matrices["scene"], matrices["prefix"], matrices["postfix"])
    return vocab, matrices, idx


def _stub_matrices(vocab: vocab_mod.Vocabulary, dim: int) -> dict[str, np.ndarray]:
    enc = embed_mod.make_stub_encoder(dim)
    return {k: embed_mod.build_matrix(vocab, k, enc).rows for k in KINDS}


def _read_vec(path: str, dim: int) -> np.ndarray:
    if path.endswith(".npy"):
        v = np.load(path)
    else:
        v = np.fromfile(path, dtype="<f4")
    v = np.asarray(v, dtype=np.float32).reshape(-1)
    if v.size != dim:
        raise FormatError(f"query vector has {v.size} values, index dim is {dim}")
    n = float(np.linalg.norm(v))
    if n == 0:
        raise FormatError("query vector has zero norm")
    return v / n


def _make_client(spec: str, timeout_s: float) -> oov_mod.CompletionClient:
    if spec.startswith("http://") or spec.startswith("https://"):
        return oov_mod.HttpClient(spec, timeout_s=timeout_s)
    return oov_mod.SubprocessClient(shlex.split(spec), timeout_s=timeout_s)


# -- subcommand bodies ----------------------------------------------------


def cmd_build_vocab(args) -> int:
    raw = Path(args.input).read_text(encoding="utf-8").splitlines()
    labels = Path(args.scenes).read_text(encoding="utf-8").splitlines()
    if len(labels) != len(raw):
        raise FormatError(f"{len(raw)} narrations but {len(labels)} scene labels")
    result = npe_mod.encode_corpus(raw)
    scene_of: dict[str, list[str]] = {}
    for line, label in zip(raw, labels):
        text = npe_mod.normalize_text(line)
        if text and label.strip():
            scene_of.setdefault(text, [])
            if label.strip() not in scene_of[text]:
                scene_of[text].append(label.strip())
    vocab = vocab_mod.from_npe(result, scene_of)
    vocab_mod.save(vocab, args.out)
    log.info("wrote %d entries to %s", len(vocab.entries), args.out)
    _emit(args, {"out": str(args.out), "entries": len(vocab.entries), "report": result.report.to_dict()})
    return 0


def cmd_embed(args) -> int:
    vocab = vocab_mod.load(args.vocab)
    sha = embed_mod.vocab_file_sha(args.vocab)
    enc = embed_mod.make_stub_encoder(args.dim)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab_mod.save(vocab, out / "vocab.jsonl")
    counts = {}
    for kind in KINDS:
        m = embed_mod.build_matrix(vocab, kind, enc, vocab_sha=sha)
        embed_mod.save_matrix(m, out / f"{kind}.nvem")
        counts[kind] = m.count
    log.info("embedded %s", counts)
    _emit(args, {"out_dir": str(out), "dim": args.dim, "counts": counts})
    return 0


def cmd_index(args) -> int:
    vocab, matrices, idx = _load_index_dir(args.index)
    stats = {
        "scenes": len(idx.scene_ids),
        "prefixes": int(matrices["prefix"].count),
        "postfixes": int(matrices["postfix"].count),
        "dim": int(matrices["prefix"].dim),
        "entries": len(vocab.entries),
    }
    log.info("index ok: %s", stats)
    _emit(args, stats)
    return 0


def cmd_datagen(args) -> int:
    spec = datagen_mod.WorldSpec(seed=args.seed)
    if args.spec:
        spec = datagen_mod.WorldSpec.from_dict(json.loads(Path(args.spec).read_text()))
    ds = datagen_mod.make_dataset(spec, n_streams=args.n_streams, split_seed=args.split_seed)
    ds.save(args.out)
    info = {
        "out": str(args.out),
        "streams": len(ds.streams),
        "train_samples": len(ds.train),
        "eval_samples": len(ds.eval),
        "vocab_entries": len(ds.world.vocabulary.entries),
    }
    log.info("dataset: %s", info)
    _emit(args, info)
    return 0


def _model_for(args, dataset) -> genret_mod.GenRetModel:
    wv = genret_mod.build_word_vocab([e.text for e in dataset.world.vocabulary.entries])
    cfg = genret_mod.ModelConfig(
        d_model=args.d_model,
        n_layers=args.n_layers,
        n_heads=args.n_heads,
        d_embed=dataset.world.spec.dim,
        max_visual_tokens=args.max_visual_tokens,
        ret_init=args.ret_init,
        seed=args.seed,
    )
    return genret_mod.GenRetModel(cfg, wv)


def cmd_train(args) -> int:
    ds = datagen_mod.Dataset.load(args.data)
    matrices = _stub_matrices(ds.world.vocabulary, ds.world.spec.dim)
    model = _model_for(args, ds)
    tlog = genret_mod.train(
        model, ds, matrices, lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed
    )
    genret_mod.save_checkpoint(model, args.out)
    log.info("saved checkpoint to %s after %d epochs", args.out, args.epochs)
    _emit(args, {"out": str(args.out), "train_log": tlog.to_dict()})
    return 0


def cmd_eval(args) -> int:
    ds = datagen_mod.Dataset.load(args.data)
    matrices = _stub_matrices(ds.world.vocabulary, ds.world.spec.dim)
    payload: dict = {}
    if args.ckpt:
        model = genret_mod.load_checkpoint(args.ckpt)
        payload["model"] = genret_mod.evaluate(model, ds, matrices).to_dict()
    if args.baseline:
        payload["baseline"] = genret_mod.baseline_eval(ds, matrices, track=args.baseline).to_dict()
    if not payload:
        raise FormatError("nothing to evaluate: pass --ckpt and/or --baseline")
    for name, res in payload.items():
        log.info("%s per-relation: %s", name, res["per_relation"])
    _emit(args, payload)
    return 0


def cmd_retrieve(args) -> int:
    vocab, matrices, idx = _load_index_dir(args.index)
    dim = int(matrices["prefix"].dim)
    if args.text:
        q = embed_mod.stub_encode_text(args.text, dim)
    else:
        q = _read_vec(args.query_vec, dim)
    chain = index_mod.retrieve_chain(q, lambda sid: q, lambda prefix_text: q, idx, beam=args.beam)
    out = chain.to_dict()
    if args.k > 1:
        top = index_mod.topk(q, matrices["prefix"], args.k, entry_ids=vocab.by_kind["prefix"])
        out["prefix_topk"] = [{"entry_id": r.entry_id, "score": r.score, "rank": r.rank} for r in top]
    log.info("retrieved: %s (prefix score %.3f)", chain.full_text, chain.prefix.score)
    _emit(args, out)
    return 0


def cmd_upgrade(args) -> int:
    vocab, matrices, idx = _load_index_dir(args.index)
    dim = int(matrices["prefix"].dim)
    snapshot = oov_mod.Snapshot(vocab=vocab, matrices=matrices, index=idx)
    if args.text:
        q = embed_mod.stub_encode_text(args.text, dim)
    else:
        q = _read_vec(args.query_vec, dim)
    chain = index_mod.retrieve_chain(q, lambda sid: q, lambda prefix_text: q, idx)
    cfg = oov_mod.UpgradeConfig(threshold=args.threshold, scene_policy=args.scene_policy, timeout_s=args.timeout)
    describer = _make_client(args.describer, args.timeout)
    proposer = _make_client(args.proposer, args.timeout)
    snapshot, report = oov_mod.detect_and_upgrade(
        snapshot, chain, describer, proposer, embed_mod.make_stub_encoder(dim), cfg,
        scene_query_emb=q, prefix_query_emb=q,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab_mod.save(snapshot.vocab, out_dir / "vocab.jsonl")
    sha = embed_mod.vocab_file_sha(out_dir / "vocab.jsonl")
    for kind in KINDS:
        m = snapshot.matrices[kind]
        embed_mod.save_matrix(embed_mod.EmbeddingMatrix(rows=m.rows, vocab_sha=sha), out_dir / f"{kind}.nvem")
    payload = {
        "out_dir": str(out_dir),
        "triggered": report is not None,
        "entries": len(snapshot.vocab.entries),
        "report": report.to_dict() if report else None,
    }
    log.info("upgrade %s: %d entries", "ran" if report else "not triggered", len(snapshot.vocab.entries))
    _emit(args, payload)
    return 0


def _run_ablation(args) -> dict:
    ds = datagen_mod.Dataset.load(args.data)
    matrices = _stub_matrices(ds.world.vocabulary, ds.world.spec.dim)
    variants = []
    for ret_init in genret_mod.RET_INITS:
        log.info("training ret_init=%s", ret_init)
        v_args = argparse.Namespace(**{**vars(args), "ret_init": ret_init})
        model = _model_for(v_args, ds)
        genret_mod.train(model, ds, matrices, lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed)
        summary = genret_mod.evaluate(model, ds, matrices)
        variants.append({
            "ret_init": ret_init,
            "casual_recall@1": summary.recall1(("current", "next", "before")),
            "per_relation": summary.to_dict()["per_relation"],
        })
    return {"schema_version": bench_mod.REPORT_SCHEMA_VERSION, "mode": "ablation", "variants": variants}


def cmd_bench(args) -> int:
    if args.mode == "hier":
        report = bench_mod.hier_speedup_bench(
            n_prefixes=args.n_prefixes, n_scenes=args.n_scenes, dim=args.dim,
            n_queries=args.n_queries, threshold=args.threshold, trials=args.trials, seed=args.seed,
        ).to_dict()
    elif args.mode == "gen-vs-ret":
        report = bench_mod.gen_vs_ret_bench(n_queries=args.n_queries, dim=args.dim, seed=args.seed)
    elif args.mode == "decomp":
        report = bench_mod.decomposition_bench(n_prefixes=args.n_prefixes, dim=args.dim, seed=args.seed)
    else:
        report = _run_ablation(args)
    written = bench_mod.write_report(report, args.out)
    if args.mode == "ablation":
        written += _render_ablation_figure(report, Path(args.out))
    log.info("wrote %s", ", ".join(str(p) for p in written))
    _emit(args, report)
    return 0


def _render_ablation_figure(report: dict, out_path: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    names = [v["ret_init"] for v in report["variants"]]
    ax.bar(names, [v["casual_recall@1"] for v in report["variants"]], color="#4878a8")
    ax.set_ylabel("casual recall@1")
    ax.set_title("Retrieval-token initialization")
    fig.tight_layout()
    p = out_path.parent / f"{out_path.stem}_ablation.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    return [p]


# -- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="narravoc", description="Generative-retrieval narration engine")
    parser.add_argument("--config", help="JSON file of per-subcommand flag defaults (env: NARRAVOC_CONFIG)")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn)
        p.add_argument("--json", action="store_true", help="machine-readable result on stdout")
        return p

    p = add("build-vocab", cmd_build_vocab, help="compress a narration corpus into a vocabulary")
    p.add_argument("--input", required=True, help="text file, one raw narration per line")
    p.add_argument("--scenes", required=True, help="text file, one scene label per line, aligned with --input")
    p.add_argument("--out", required=True, help="output vocabulary JSONL path")

    p = add("embed", cmd_embed, help="embed a vocabulary into binary matrices")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--dim", type=int, default=64)

    p = add("index", cmd_index, help="load and validate an index directory")
    p.add_argument("--index", required=True, help="directory with vocab.jsonl and *.nvem matrices")

    p = add("datagen", cmd_datagen, help="generate a synthetic dataset")
    p.add_argument("--spec", help="world spec JSON file (defaults used when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--n-streams", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)

    def add_model_flags(p):
        p.add_argument("--d-model", type=int, default=64)
        p.add_argument("--n-layers", type=int, default=2)
        p.add_argument("--n-heads", type=int, default=4)
        p.add_argument("--max-visual-tokens", type=int, default=8)
        p.add_argument("--ret-init", choices=genret_mod.RET_INITS, default="pool")
        p.add_argument("--lr", type=float, default=3e-4)
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--epochs", type=int, default=10)
        p.add_argument("--seed", type=int, default=0)

    p = add("train", cmd_train, help="train the retrieval-token model")
    p.add_argument("--data", required=True, help="dataset directory from datagen")
    p.add_argument("--out", required=True, help="checkpoint output path")
    add_model_flags(p)

    p = add("eval", cmd_eval, help="evaluate a checkpoint and/or the pooling baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--baseline", choices=("naive", "casual"))

    p = add("retrieve", cmd_retrieve, help="run the scene->prefix->postfix chain")
    p.add_argument("--index", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--text", help="query text, embedded with the stub encoder")
    g.add_argument("--query-vec", help="query vector file (.npy or raw little-endian f32)")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--k", type=int, default=5)

    p = add("upgrade", cmd_upgrade, help="detect an out-of-vocabulary event and upgrade the vocabulary")
    p.add_argument("--index", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--text")
    g.add_argument("--query-vec")
    p.add_argument("--describer", required=True, help="command line, or http(s):// base URL")
    p.add_argument("--proposer", required=True, help="command line, or http(s):// base URL")
    p.add_argument("--threshold", type=float, default=0.4)
    p.add_argument("--scene-policy", choices=("top1", "global"), default="top1")
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--out-dir", required=True)

    p = add("bench", cmd_bench, help="benchmarks and the retrieval-token ablation")
    p.add_argument("--mode", choices=("decomp", "hier", "gen-vs-ret", "ablation"), required=True)
    p.add_argument("--out", required=True, help="report JSON path; CSV and figures land beside it")
    p.add_argument("--n-prefixes", type=int, default=100_000)
    p.add_argument("--n-scenes", type=int, default=100)
    p.add_argument("--n-queries", type=int, default=20)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--threshold", type=float, default=10.0)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--data", help="dataset directory (ablation mode)")
    add_model_flags(p)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        config = _load_config(argv)
    except NarravocError as e:
        log.error("%s", e)
        return 1
    try:
        ns, _ = parser.parse_known_args(argv)
        defaults = config.get(ns.command or "", {})
        if defaults:
            parser.set_defaults()  # flags win: only fill values the user did not pass
            args = parser.parse_args(argv)
            passed = {a.split("=")[0] for a in argv if a.startswith("--")}
            for key, val in defaults.items():
                if f"--{key.replace('_', '-')}" not in passed:
                    setattr(args, key.replace("-", "_"), val)
        else:
            args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    if args.command == "bench" and args.mode == "ablation" and not args.data:
        print("narravoc bench: --data is required for --mode ablation", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except NarravocError as e:
        log.error("%s: %s", e.code, e)
        return 1
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as e:
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
