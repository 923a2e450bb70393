import pytest

from narravoc.metrics import chain_exact_match, recall_at_k


def test_recall_at_k():
    preds = [[3, 1, 2], [0, 5, 9], [7, 7, 7]]
    targets = [1, 9, 4]
    assert recall_at_k(preds, targets, 1) == 0.0
    assert recall_at_k(preds, targets, 2) == pytest.approx(1 / 3)
    assert recall_at_k(preds, targets, 3) == pytest.approx(2 / 3)


def test_recall_empty():
    assert recall_at_k([], [], 1) == 0.0


def test_recall_length_mismatch():
    with pytest.raises(ValueError):
        recall_at_k([[1]], [1, 2], 1)


def test_chain_exact_match():
    pred = [(1, 0), (2, 3), (4, 0)]
    true = [(1, 0), (2, 4), (5, 0)]
    assert chain_exact_match(pred, true) == pytest.approx(1 / 3)
