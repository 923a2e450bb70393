"""Benchmark harness: encoding/decoding/upgrading decomposition, hierarchy
vs brute-force speedup, and retrieval vs token-by-token generation.

Reports are machine-readable (JSON plus a CSV mirror) and the report path
also renders matplotlib figures next to the delimited output.  Speedup
thresholds assert the mechanism, not exact hardware-bound ratios.
"""

from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import MismatchedRuns
from .index import _topk_rows

REPORT_SCHEMA_VERSION = 1

MODES = ("generative", "retrieval-bruteforce", "retrieval-hier")


@dataclass
class TimingReport:
    mode: str
    n_queries: int
    vocab_size: int
    encoding_s: float = 0.0
    decoding_s: float = 0.0
    upgrading_s: float = 0.0

    @property
    def total_s(self) -> float:
        return self.encoding_s + self.decoding_s + self.upgrading_s

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_queries": self.n_queries,
            "vocab_size": self.vocab_size,
            "encoding_s": self.encoding_s,
            "decoding_s": self.decoding_s,
            "upgrading_s": self.upgrading_s,
            "total_s": self.total_s,
        }


def time_decomposition(
    decode_fn: Callable[[np.ndarray], object],
    queries: Sequence[np.ndarray],
    mode: str,
    vocab_size: int,
    encode_fn: Callable[[], object] | None = None,
    upgrade_fn: Callable[[], object] | None = None,
    warmup: int = 3,
    trials: int = 5,
) -> TimingReport:
    """Wall-clock decomposition on a monotonic clock.

    `encode_fn` is the one-time vocabulary embedding step; decoding is the
    median over `trials` full passes of the query set, after `warmup`
    excluded warm-up queries.
    """
    report = TimingReport(mode=mode, n_queries=len(queries), vocab_size=vocab_size)
    if encode_fn is not None:
        t0 = time.perf_counter()
        encode_fn()
        report.encoding_s = time.perf_counter() - t0
    if not queries:
        return report
    for q in list(queries)[:warmup]:
        decode_fn(q)
    samples = []
    for _ in range(trials):
        t0 = time.perf_counter()
        for q in queries:
            decode_fn(q)
        samples.append(time.perf_counter() - t0)
    report.decoding_s = statistics.median(samples)
    if upgrade_fn is not None:
        t0 = time.perf_counter()
        upgrade_fn()
        report.upgrading_s = time.perf_counter() - t0
    return report


@dataclass
class SpeedupReport:
    baseline_mode: str
    fast_mode: str
    ratio: float
    threshold: float
    passed: bool
    reports: list[TimingReport] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "baseline_mode": self.baseline_mode,
            "fast_mode": self.fast_mode,
            "ratio": self.ratio,
            "threshold": self.threshold,
            "passed": self.passed,
            "reports": [r.to_dict() for r in self.reports],
        }


def compare(baseline: TimingReport, fast: TimingReport, threshold: float) -> SpeedupReport:
    """Decode-time ratio baseline/fast with a pass/fail threshold."""
    if baseline.n_queries != fast.n_queries:
        raise MismatchedRuns(f"query counts differ: {baseline.n_queries} vs {fast.n_queries}")
    ratio = baseline.decoding_s / fast.decoding_s if fast.decoding_s > 0 else float("inf")
    return SpeedupReport(
        baseline_mode=baseline.mode,
        fast_mode=fast.mode,
        ratio=ratio,
        threshold=threshold,
        passed=ratio >= threshold,
        reports=[baseline, fast],
    )


# -- synthetic hierarchy benchmark ----------------------------------------


@dataclass
class SyntheticHierarchy:
    """Flat random vocabulary partitioned evenly into scenes; rows are the
    timing stand-in for real narrations (content is irrelevant to cost)."""

    scene_rows: np.ndarray
    prefix_rows: np.ndarray
    postfix_rows: np.ndarray
    scene_slices: list[tuple[int, int]]

    @classmethod
    def make(cls, n_prefixes: int = 800_000, n_scenes: int = 100, n_postfixes: int = 5000, dim: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)

        def unit(n):
            m = rng.standard_normal((n, dim)).astype(np.float32)
            return m / np.linalg.norm(m, axis=1, keepdims=True)

        per = n_prefixes // n_scenes
        slices = [(i * per, (i + 1) * per if i < n_scenes - 1 else n_prefixes) for i in range(n_scenes)]
        return cls(scene_rows=unit(n_scenes), prefix_rows=unit(n_prefixes), postfix_rows=unit(n_postfixes), scene_slices=slices)

    def hier_decode(self, query: np.ndarray):
        sid = int(_topk_rows(query, self.scene_rows, 1)[0][0])
        lo, hi = self.scene_slices[sid]
        pid = int(_topk_rows(query, self.prefix_rows[lo:hi], 1)[0][0]) + lo
        post = int(_topk_rows(query, self.postfix_rows, 1)[0][0])
        return sid, pid, post

    def brute_decode(self, query: np.ndarray):
        pid = int(_topk_rows(query, self.prefix_rows, 1)[0][0])
        post = int(_topk_rows(query, self.postfix_rows, 1)[0][0])
        return pid, post


def hier_speedup_bench(
    n_prefixes: int = 800_000,
    n_scenes: int = 100,
    dim: int = 64,
    n_queries: int = 20,
    threshold: float = 10.0,
    trials: int = 5,
    seed: int = 0,
) -> SpeedupReport:
    """Hierarchical chain decode vs brute-force scan over the same rows."""
    world = SyntheticHierarchy.make(n_prefixes=n_prefixes, n_scenes=n_scenes, dim=dim, seed=seed)
    rng = np.random.default_rng(seed + 1)
    queries = [q / np.linalg.norm(q) for q in rng.standard_normal((n_queries, dim)).astype(np.float32)]
    brute = time_decomposition(world.brute_decode, queries, "retrieval-bruteforce", n_prefixes, trials=trials)
    hier = time_decomposition(world.hier_decode, queries, "retrieval-hier", n_prefixes, trials=trials)
    return compare(brute, hier, threshold)


# -- retrieval vs generation ----------------------------------------------


def linear_fit_r2(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares slope/intercept plus R^2 of y ~ a*x + b."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    a, b = np.polyfit(x, y, 1)
    pred = a * x + b
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(a), float(b), r2


def gen_vs_ret_bench(
    n_queries: int = 30,
    dim: int = 64,
    vocab_rows: int = 4096,
    decode_caps: Sequence[int] = (4, 8, 16, 32),
    threshold: float = 5.0,
    seed: int = 0,
) -> dict:
    """Per-clip retrieval vs greedy 16-token generation on the same backbone
    dims, plus the linear per-token cost model fit."""
    from .genret import GenRetModel, GenerativeModel, ModelConfig, WordVocab

    rng = np.random.default_rng(seed)
    words = [f"w{i}" for i in range(64)]
    wv = WordVocab(words=["<pad>", "<eos>"] + words)
    cfg = ModelConfig(d_embed=dim, seed=seed)
    ret_model = GenRetModel(cfg, wv)
    gen_model = GenerativeModel(cfg, wv, max_decode_len=16)
    vocab = rng.standard_normal((vocab_rows, dim)).astype(np.float32)
    vocab /= np.linalg.norm(vocab, axis=1, keepdims=True)
    clips = rng.standard_normal((n_queries, 8, dim)).astype(np.float32)
    clips /= np.linalg.norm(clips, axis=2, keepdims=True)

    def retrieve(clip):
        t = ret_model.forward_retrieval(clip, "what is happening?")
        return int(np.argmax(vocab @ t))

    def generate(clip):
        return gen_model.decode(clip, "", length_cap=16)

    ret_rep = time_decomposition(retrieve, list(clips), "retrieval-hier", vocab_rows, trials=3)
    gen_rep = time_decomposition(generate, list(clips), "generative", vocab_rows, trials=3)
    speedup = compare(gen_rep, ret_rep, threshold)

    cap_times = []
    probe = clips[:8]
    for cap in decode_caps:
        t0 = time.perf_counter()
        for clip in probe:
            gen_model.decode(clip, "", length_cap=cap)
        cap_times.append((time.perf_counter() - t0) / len(probe))
    slope, intercept, r2 = linear_fit_r2(list(decode_caps), cap_times)
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "speedup": speedup.to_dict(),
        "per_token_model": {
            "caps": list(decode_caps),
            "mean_decode_s": cap_times,
            "slope_s_per_token": slope,
            "intercept_s": intercept,
            "r2": r2,
        },
    }


def decomposition_bench(
    n_prefixes: int = 50_000,
    dim: int = 64,
    query_counts: Sequence[int] = (100, 1000, 10_000),
    seed: int = 0,
) -> dict:
    """Encoding/decoding/upgrading columns across growing query counts;
    encoding is one-time and must not scale with N."""
    rng = np.random.default_rng(seed)

    def encode_once():
        m = rng.standard_normal((n_prefixes, dim)).astype(np.float32)
        return m / np.linalg.norm(m, axis=1, keepdims=True)

    rows = encode_once()
    reports = []
    for n in query_counts:
        queries = rng.standard_normal((n, dim)).astype(np.float32)
        queries /= np.linalg.norm(queries, axis=1, keepdims=True)
        rep = time_decomposition(
            lambda q: int(_topk_rows(q, rows, 1)[0][0]),
            list(queries),
            "retrieval-bruteforce",
            n_prefixes,
            encode_fn=encode_once,
            trials=3,
            warmup=min(3, n),
        )
        reports.append(rep)
    return {"schema_version": REPORT_SCHEMA_VERSION, "reports": [r.to_dict() for r in reports]}


# -- report output --------------------------------------------------------


def write_csv(reports: list[TimingReport], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["mode", "n_queries", "vocab_size", "encoding_s", "decoding_s", "upgrading_s", "total_s"]
        )
        writer.writeheader()
        for r in reports:
            writer.writerow(r.to_dict())


def render_figures(report: dict, out_dir: str | Path, stem: str) -> list[Path]:
    """Render matplotlib figures for a bench report next to its JSON/CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    timing = report.get("reports") or (report.get("speedup") or {}).get("reports")
    if timing:
        fig, ax = plt.subplots(figsize=(6, 4))
        labels = [f"{r['mode']}\nN={r['n_queries']}" for r in timing]
        ax.bar(labels, [r["decoding_s"] for r in timing], color="#4878a8")
        ax.set_ylabel("decode time (s)")
        ratio = (report.get("speedup") or report).get("ratio")
        title = "Decode time by mode"
        if ratio:
            title += f" (speedup {ratio:.1f}x)"
        ax.set_title(title)
        fig.tight_layout()
        p = out / f"{stem}_decode_time.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        written.append(p)

    model = report.get("per_token_model")
    if model:
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot(model["caps"], model["mean_decode_s"], "o", label="measured")
        xs = np.linspace(min(model["caps"]), max(model["caps"]), 50)
        ax.plot(xs, model["slope_s_per_token"] * xs + model["intercept_s"], "-", label=f"linear fit (R2={model['r2']:.3f})")
        ax.set_xlabel("decoded tokens")
        ax.set_ylabel("mean decode time (s)")
        ax.set_title("Token-by-token decode cost")
        ax.legend()
        fig.tight_layout()
        p = out / f"{stem}_per_token.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        written.append(p)
    return written


def write_report(report: dict, out_path: str | Path) -> list[Path]:
    """Write JSON + CSV mirror + figures for any bench report dict."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(report, indent=2))
    written = [out_path]
    timing = report.get("reports") or (report.get("speedup") or {}).get("reports")
    if timing:
        csv_path = out_path.with_suffix(".csv")
        write_csv([TimingReport(**{k: r[k] for k in ("mode", "n_queries", "vocab_size", "encoding_s", "decoding_s", "upgrading_s")}) for r in timing], csv_path)
        written.append(csv_path)
    written += render_figures(report, out_path.parent, out_path.stem)
    return written
