"""Similarity search over vocabulary embeddings.

Exact linear-scan top-k (no approximation), a brute-force full-vocabulary
baseline, and the hierarchical scene -> prefix -> postfix retrieval chain.
Ties always break by ascending entry id so results are reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import AlignmentError, EmptyScene
from .embed import EmbeddingMatrix
from .npe import EMPTY_POSTFIX
from .vocab import Vocabulary


@dataclass(frozen=True)
class RetrievalResult:
    entry_id: int
    score: float
    rank: int


@dataclass
class SubMatrix:
    entry_ids: np.ndarray  # global entry ids, one per row
    rows: np.ndarray  # view into the full prefix matrix


@dataclass
class HierIndex:
    vocab: Vocabulary
    scene_matrix: EmbeddingMatrix
    prefix_matrix: EmbeddingMatrix
    postfix_matrix: EmbeddingMatrix
    prefix_submatrices: dict[int, SubMatrix] = field(default_factory=dict)
    vocab_hash: bytes = b"\x00" * 32

    @property
    def scene_ids(self) -> list[int]:
        return self.vocab.by_kind["scene"]

    @property
    def postfix_ids(self) -> list[int]:
        return self.vocab.by_kind["postfix"]


@dataclass
class ChainResult:
    scene: RetrievalResult
    prefix: RetrievalResult
    postfix: RetrievalResult
    full_text: str
    timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        def r(x: RetrievalResult) -> dict:
            return {"entry_id": x.entry_id, "score": x.score, "rank": x.rank}

        return {
            "scene": r(self.scene),
            "prefix": r(self.prefix),
            "postfix": r(self.postfix),
            "full_text": self.full_text,
            "timings": self.timings,
        }


def build(
    vocab: Vocabulary,
    scene_m: EmbeddingMatrix,
    prefix_m: EmbeddingMatrix,
    postfix_m: EmbeddingMatrix,
    vocab_hash: bytes = b"\x00" * 32,
) -> HierIndex:
    """Assemble the hierarchical index; sub-matrix rows are views into
    `prefix_m` whenever a scene's prefixes are contiguous, copies otherwise."""
    for kind, m in (("scene", scene_m), ("prefix", prefix_m), ("postfix", postfix_m)):
        if m.count != len(vocab.by_kind[kind]):
            raise AlignmentError(
                f"{kind} matrix has {m.count} rows but vocabulary has {len(vocab.by_kind[kind])} entries"
            )
    prefix_row_of = {eid: i for i, eid in enumerate(vocab.by_kind["prefix"])}
    subs: dict[int, SubMatrix] = {}
    for sid, prefix_ids in vocab.prefixes_by_scene.items():
        row_idx = np.array([prefix_row_of[p] for p in prefix_ids], dtype=np.int64)
        subs[sid] = SubMatrix(
            entry_ids=np.array(prefix_ids, dtype=np.int64),
            rows=prefix_m.rows[row_idx],
        )
    return HierIndex(
        vocab=vocab,
        scene_matrix=scene_m,
        prefix_matrix=prefix_m,
        postfix_matrix=postfix_m,
        prefix_submatrices=subs,
        vocab_hash=vocab_hash,
    )


def _topk_rows(query: np.ndarray, rows: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-k row indices and scores with ascending-index tie-break."""
    scores = rows @ np.asarray(query, dtype=np.float32)
    n = scores.shape[0]
    k = min(k, n)
    if k < n:
        part = np.argpartition(-scores, k - 1)[:k]
        # Pull in every row tied with the k-th score so the id tie-break is
        # decided over the full tie group, not argpartition's arbitrary pick.
        thr = scores[part].min()
        cand = np.flatnonzero(scores >= thr)
    else:
        cand = np.arange(n)
    order = cand[np.lexsort((cand, -scores[cand]))][:k]
    return order, scores[order]


def topk(query: np.ndarray, matrix: EmbeddingMatrix | np.ndarray, k: int, entry_ids=None) -> list[RetrievalResult]:
    """Exact top-k by dot product over the matrix rows.

    `entry_ids` maps row index -> entry id (defaults to the row index).
    k larger than the row count returns every row.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rows = matrix.rows if isinstance(matrix, EmbeddingMatrix) else matrix
    idx, scores = _topk_rows(query, rows, k)
    if entry_ids is not None:
        ids = np.asarray(entry_ids)[idx]
        # Re-sort by (score desc, entry id asc) since tie-break is on entry
        # ids, which may not follow row order.
        order = np.lexsort((ids, -scores))
        idx, scores, ids = idx[order], scores[order], ids[order]
    else:
        ids = idx
    return [RetrievalResult(entry_id=int(i), score=float(s), rank=r) for r, (i, s) in enumerate(zip(ids, scores))]


def brute_force_topk(query: np.ndarray, matrix: EmbeddingMatrix | np.ndarray, k: int, entry_ids=None) -> list[RetrievalResult]:
    """Linear scan over the full matrix; the accuracy/time baseline."""
    return topk(query, matrix, k, entry_ids=entry_ids)


def retrieve_chain(
    scene_query_emb: np.ndarray,
    prefix_query_emb_fn: Callable[[int], np.ndarray],
    postfix_query_emb_fn: Callable[[str], np.ndarray],
    idx: HierIndex,
    beam: int = 1,
) -> ChainResult:
    """Run the scene -> prefix -> postfix retrieval chain.

    The caller supplies the query embedding for each stage:
    `prefix_query_emb_fn(scene_entry_id)` and
    `postfix_query_emb_fn(prefix_text)` let a trained model condition the
    later stages on what was retrieved.  With `beam` > 1 the top-b scenes
    are searched and prefix candidates compete on raw cosine across beams.
    """
    t0 = time.perf_counter()
    scene_hits = topk(scene_query_emb, idx.scene_matrix, beam, entry_ids=idx.scene_ids)
    t1 = time.perf_counter()

    best_prefix: RetrievalResult | None = None
    best_scene: RetrievalResult | None = None
    for scene_hit in scene_hits:
        sub = idx.prefix_submatrices.get(scene_hit.entry_id)
        if sub is None or sub.rows.shape[0] == 0:
            raise EmptyScene(scene_hit.entry_id)
        hit = topk(prefix_query_emb_fn(scene_hit.entry_id), sub.rows, 1, entry_ids=sub.entry_ids)[0]
        if best_prefix is None or (-hit.score, hit.entry_id) < (-best_prefix.score, best_prefix.entry_id):
            best_prefix = hit
            best_scene = scene_hit
    assert best_prefix is not None and best_scene is not None
    t2 = time.perf_counter()

    prefix_text = idx.vocab.entries[best_prefix.entry_id].text
    post_hit = topk(postfix_query_emb_fn(prefix_text), idx.postfix_matrix, 1, entry_ids=idx.postfix_ids)[0]
    t3 = time.perf_counter()

    post_text = idx.vocab.entries[post_hit.entry_id].text
    full_text = prefix_text if post_text == EMPTY_POSTFIX else f"{prefix_text} {post_text}"
    return ChainResult(
        scene=RetrievalResult(best_scene.entry_id, best_scene.score, 0),
        prefix=RetrievalResult(best_prefix.entry_id, best_prefix.score, 0),
        postfix=RetrievalResult(post_hit.entry_id, post_hit.score, 0),
        full_text=full_text,
        timings={"scene_s": t1 - t0, "prefix_s": t2 - t1, "postfix_s": t3 - t2},
    )
