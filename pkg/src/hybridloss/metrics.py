"""0-1 error and chunk-level precision / recall / F1 over BIO tags."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


class TagFormatError(ValueError):
    pass


def zero_one_error(predictions: Sequence, golds: Sequence) -> float:
    if len(predictions) != len(golds):
        raise ValueError(f"{len(predictions)} predictions for {len(golds)} gold labels")
    if len(golds) == 0:
        raise ValueError("cannot score an empty prediction list")
    wrong = sum(1 for p, g in zip(predictions, golds) if p != g)
    return wrong / len(golds)


def _parse(tag: str, where: str) -> tuple[str, str]:
    if tag == "O":
        return "O", ""
    if len(tag) > 2 and tag[1] == "-" and tag[0] in "BI":
        return tag[0], tag[2:]
    raise TagFormatError(f"malformed BIO tag {tag!r} at {where}")


def extract_chunks(tags: Sequence[str], sentence: int = 0) -> set[tuple[int, int, str]]:
    """Chunks as (start, end_exclusive, type).

    An I- tag that does not continue a chunk of its own type opens a new one,
    as conlleval does.
    """
    chunks = set()
    start, kind = None, None
    for j, tag in enumerate(tags):
        prefix, typ = _parse(tag, f"sentence {sentence}, position {j}")
        continues = prefix == "I" and kind == typ
        if kind is not None and not continues:
            chunks.add((start, j, kind))
            start, kind = None, None
        if prefix == "B" or (prefix == "I" and not continues):
            start, kind = j, typ
    if kind is not None:
        chunks.add((start, len(tags), kind))
    return chunks


@dataclass(frozen=True)
class ChunkEval:
    accuracy: float
    precision: float
    recall: float
    f1: float
    predicted_chunks: int
    gold_chunks: int
    correct_chunks: int


def _ratio(num: int, den: int, other_den: int) -> float:
    if den == 0:
        return 1.0 if other_den == 0 else 0.0
    return num / den


def chunk_f1(predicted: Sequence[Sequence[str]], gold: Sequence[Sequence[str]]) -> ChunkEval:
    """Micro-averaged chunk metrics over a list of sentences."""
    if len(predicted) != len(gold):
        raise ValueError(f"{len(predicted)} predicted sentences for {len(gold)} gold sentences")
    n_pred = n_gold = n_correct = tokens = right = 0
    for i, (p, g) in enumerate(zip(predicted, gold)):
        if len(p) != len(g):
            raise ValueError(f"sentence {i}: {len(p)} predicted tags for {len(g)} gold tags")
        pc, gc = extract_chunks(p, i), extract_chunks(g, i)
        n_pred += len(pc)
        n_gold += len(gc)
        n_correct += len(pc & gc)
        tokens += len(g)
        right += sum(a == b for a, b in zip(p, g))
    precision = _ratio(n_correct, n_pred, n_gold)
    recall = _ratio(n_correct, n_gold, n_pred)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    accuracy = right / tokens if tokens else 1.0
    return ChunkEval(accuracy, precision, recall, f1, n_pred, n_gold, n_correct)


def accuracy(predictions, golds) -> float:
    return 1.0 - zero_one_error(np.asarray(predictions).tolist(), np.asarray(golds).tolist())


def tie_aware_error(scores: np.ndarray, gold: np.ndarray, counts: np.ndarray | None = None,
                    tol: float = 1e-6) -> float:
    """Expected 0-1 error when tied top labels are picked uniformly at random.

    Labels whose score is within ``tol`` of the row maximum count as tied.
    """
    scores = np.asarray(scores, dtype=float)
    gold = np.asarray(gold, dtype=np.int64)
    if scores.ndim != 2 or len(scores) != len(gold):
        raise ValueError("need an (m, k) score matrix and m gold labels")
    if len(gold) == 0:
        raise ValueError("cannot score an empty prediction list")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite values")
    tied = scores >= scores.max(axis=1, keepdims=True) - tol
    hit = tied[np.arange(len(gold)), gold] / tied.sum(axis=1)
    c = np.ones(len(gold)) if counts is None else np.asarray(counts, dtype=float)
    return float(1.0 - hit @ c / c.sum())
