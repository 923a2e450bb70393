"""Recall@K and chain exact-match over oracle-labeled samples."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence


@dataclass
class EvalResult:
    track: str
    per_relation: dict[str, dict[str, float]] = field(default_factory=dict)
    chain_exact_match: float | None = None

    def to_dict(self) -> dict:
        return {
            "track": self.track,
            "per_relation": self.per_relation,
            "chain_exact_match": self.chain_exact_match,
        }


def recall_at_k(predictions: Sequence[Sequence[int]], targets: Sequence[int], k: int) -> float:
    """Fraction of samples whose target appears in the top-k of its ranked list."""
    if len(predictions) != len(targets):
        raise ValueError("predictions and targets must have equal length")
    if not targets:
        return 0.0
    hits = sum(1 for ranked, t in zip(predictions, targets) if t in list(ranked)[:k])
    return hits / len(targets)


def chain_exact_match(
    chain_predictions: Sequence[tuple[int, int]],
    targets: Sequence[tuple[int, int]],
) -> float:
    """Credit a sample only when both prefix and postfix ids match
    (EMPTY matches EMPTY like any other id)."""
    if len(chain_predictions) != len(targets):
        raise ValueError("predictions and targets must have equal length")
    if not targets:
        return 0.0
    hits = sum(1 for p, t in zip(chain_predictions, targets) if tuple(p) == tuple(t))
    return hits / len(targets)
