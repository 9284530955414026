"""Log, hinge and hybrid losses on score vectors.

The hinge is evaluated on raw scores.  For probabilities obtained by a
softmax, ``ln(p_y / p_y') = f_y - f_y'``, so ``[1 - ln(p_y / max p_y')]_+``
and ``[1 - M(f, y)]_+`` are the same number.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import FlatDataset, FlatInstance, best_other, logsumexp, score_flat, softmax

KINDS = ("log", "hinge", "hybrid")


@dataclass(frozen=True)
class LossSpec:
    kind: str = "hybrid"
    alpha: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "log":
            object.__setattr__(self, "alpha", 1.0)
        elif self.kind == "hinge":
            object.__setattr__(self, "alpha", 0.0)
        a = float(self.alpha)
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {a}")
        object.__setattr__(self, "alpha", a)

    @classmethod
    def log(cls) -> "LossSpec":
        return cls("log", 1.0)

    @classmethod
    def hinge(cls) -> "LossSpec":
        return cls("hinge", 0.0)

    @classmethod
    def hybrid(cls, alpha: float) -> "LossSpec":
        return cls("hybrid", alpha)

    @property
    def label(self) -> str:
        return self.kind


@dataclass(frozen=True)
class LossEval:
    value: float
    score_gradient: np.ndarray


def _check_gold(scores: np.ndarray, gold: int):
    if not 0 <= gold < len(scores):
        raise IndexError(f"gold label {gold} outside [0, {len(scores)})")


def log_loss(scores, gold: int) -> LossEval:
    scores = np.asarray(scores, dtype=float)
    _check_gold(scores, gold)
    grad = softmax(scores)
    grad[gold] -= 1.0
    value = logsumexp(scores) - scores[gold]
    return LossEval(max(float(value), 0.0), grad)


def hinge_loss(scores, gold: int) -> LossEval:
    scores = np.asarray(scores, dtype=float)
    _check_gold(scores, gold)
    rival = best_other(scores, gold)
    slack = 1.0 - (scores[gold] - scores[rival])
    grad = np.zeros_like(scores)
    if slack <= 0.0:
        return LossEval(0.0, grad)
    grad[gold] = -1.0
    grad[rival] = 1.0
    return LossEval(float(slack), grad)


def hybrid_loss(scores, gold: int, alpha: float) -> LossEval:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 1.0:
        return log_loss(scores, gold)
    if alpha == 0.0:
        return hinge_loss(scores, gold)
    lg = log_loss(scores, gold)
    hg = hinge_loss(scores, gold)
    return LossEval(alpha * lg.value + (1 - alpha) * hg.value,
                    alpha * lg.score_gradient + (1 - alpha) * hg.score_gradient)


def evaluate(spec: LossSpec, scores, gold: int) -> LossEval:
    return hybrid_loss(scores, gold, spec.alpha)


def loss_and_weight_gradient(spec: LossSpec, weights, instance: FlatInstance) -> tuple[float, np.ndarray]:
    weights = np.asarray(weights, dtype=float)
    ev = evaluate(spec, score_flat(weights, instance), instance.gold_label)
    grad = np.zeros(len(weights))
    for g, feats in zip(ev.score_gradient, instance.features_per_label):
        if g != 0.0:
            for j, v in feats.entries.items():
                grad[j] += g * v
    return ev.value, grad


def batch_losses(spec: LossSpec, scores: np.ndarray, gold: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise losses and score gradients for an ``(m, k)`` score matrix.

    Same numbers as calling :func:`evaluate` per row.
    """
    scores = np.asarray(scores, dtype=float)
    m, k = scores.shape
    rows = np.arange(m)
    alpha = spec.alpha
    values = np.zeros(m)
    grad = np.zeros_like(scores)
    if alpha > 0.0:
        top = scores.max(axis=1, keepdims=True)
        e = np.exp(scores - top)
        z = e.sum(axis=1)
        lse = top[:, 0] + np.log(z)
        p = e / z[:, None]
        p[rows, gold] -= 1.0
        values += alpha * np.maximum(lse - scores[rows, gold], 0.0)
        grad += alpha * p
    if alpha < 1.0:
        masked = scores.copy()
        masked[rows, gold] = -np.inf
        rival = np.argmax(masked, axis=1)
        slack = 1.0 - (scores[rows, gold] - masked[rows, rival])
        active = slack > 0.0
        values += (1 - alpha) * np.where(active, slack, 0.0)
        w = (1 - alpha) * active
        grad[rows, gold] -= w
        grad[rows, rival] += w
    return values, grad


def smoothed_batch_losses(spec: LossSpec, scores: np.ndarray, gold: np.ndarray,
                          temperature: float) -> tuple[np.ndarray, np.ndarray]:
    """Like :func:`batch_losses` with the hinge replaced by a smooth upper bound.

    The hinge equals ``max_y' (f_y' + [y' != y]) - f_y``; the max becomes a
    log-sum-exp at ``temperature``, which overestimates it by at most
    ``temperature * ln k``.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    scores = np.asarray(scores, dtype=float)
    alpha = spec.alpha
    if alpha == 1.0:
        return batch_losses(spec, scores, gold)
    m, k = scores.shape
    rows = np.arange(m)
    values, grad = batch_losses(LossSpec.log(), scores, gold) if alpha > 0 else (np.zeros(m), np.zeros_like(scores))
    values *= alpha
    grad *= alpha
    a = scores + 1.0
    a[rows, gold] -= 1.0
    a /= temperature
    top = a.max(axis=1, keepdims=True)
    e = np.exp(a - top)
    z = e.sum(axis=1)
    p = e / z[:, None]
    p[rows, gold] -= 1.0
    values += (1 - alpha) * (temperature * (top[:, 0] + np.log(z)) - scores[rows, gold])
    grad += (1 - alpha) * p
    return values, grad


def batch_objective_terms(spec: LossSpec, data: FlatDataset, weights,
                          temperature: float | None = None) -> tuple[float, np.ndarray]:
    """Mean loss over ``data`` and its gradient in weight space.

    With ``temperature`` set the hinge part is smoothed (see
    :func:`smoothed_batch_losses`).
    """
    scores = data.scores(weights)
    if temperature is None:
        values, sgrad = batch_losses(spec, scores, data.gold)
    else:
        values, sgrad = smoothed_batch_losses(spec, scores, data.gold, temperature)
    c = data.counts
    total = data.total
    wgrad = data.weight_gradient(sgrad * c[:, None])
    return float(values @ c / total), wgrad / total
