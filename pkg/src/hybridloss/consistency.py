"""Alignment, the dominance-gap condition on alpha, and checking tools.

``simplex_risk_minimizer`` is a brute-force oracle: it minimizes the
conditional risk ``E_{y~q} loss_alpha(p, y)`` over a grid of the probability
simplex, then polishes the best grid points by pairwise mass transfer.  It is
deliberately independent of the training code.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Protocol, Sequence

import numpy as np

from .chain import ChainBatch, ChainInstance, ChainModel, batch_forward_backward, batch_path_scores, batch_viterbi
from .losses import LossSpec

TIE_TOL = 1e-9
MAX_ORACLE_LABELS = 5


def argmax_set(values, tol: float = TIE_TOL) -> set[int]:
    values = np.asarray(values, dtype=float)
    return set(np.flatnonzero(values >= values.max() - tol).tolist())


def is_aligned(scores, q, tol: float = TIE_TOL) -> bool:
    scores = np.asarray(scores, dtype=float)
    q = np.asarray(q, dtype=float)
    if scores.shape != q.shape:
        raise ValueError(f"score vector has {scores.size} entries but distribution has {q.size}")
    return argmax_set(scores, tol) <= argmax_set(q, tol)


def check_distribution(q, tol: float = 1e-9) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.ndim != 1 or q.size < 2:
        raise ValueError("a label distribution needs at least 2 entries")
    if np.any(q < 0) or np.any(q > 1) or abs(q.sum() - 1.0) > tol:
        raise ValueError(f"not a probability vector: {q}")
    return q


@dataclass(frozen=True)
class DominanceReport:
    top_label: int
    runner_up: int
    top_prob: float
    second_prob: float
    dominant: bool
    gap: float
    alpha_threshold: float
    raw_threshold: float

    def satisfied_by(self, alpha: float) -> bool:
        """Whether the hybrid with this alpha is guaranteed consistent for q."""
        return self.dominant or alpha > self.raw_threshold


def alpha_condition(q) -> DominanceReport:
    q = check_distribution(q)
    order = np.argsort(-q, kind="stable")
    y1, y2 = int(order[0]), int(order[1])
    q1, q2 = float(q[y1]), float(q[y2])
    gap = q1 - q2
    if q1 > 0.5:
        return DominanceReport(y1, y2, q1, q2, True, gap, 0.0, -np.inf)
    denom = 1.0 - 2.0 * q1
    if denom <= 0.0:
        # q1 exactly 1/2: limit of the condition
        raw = -np.inf if gap > 0 else 1.0
    else:
        raw = 1.0 - gap / denom
    return DominanceReport(y1, y2, q1, q2, False, gap, float(np.clip(raw, 0.0, 1.0)), float(raw))


# --- simplex oracle ----------------------------------------------------------

@lru_cache(maxsize=None)
def _compositions(total: int, parts: int) -> np.ndarray:
    """All vectors of ``parts`` positive integers summing to ``total``."""
    if parts == 1:
        return np.array([[total]], dtype=np.int32)
    blocks = []
    for first in range(1, total - parts + 2):
        rest = _compositions(total - first, parts - 1)
        blocks.append(np.hstack([np.full((len(rest), 1), first, dtype=np.int32), rest]))
    return np.vstack(blocks)


def hinge_matrix(logp: np.ndarray) -> np.ndarray:
    """``[1 - (ln p_y - max_{y' != y} ln p_y')]_+`` for every row and label."""
    order = np.argsort(-logp, axis=1, kind="stable")
    rows = np.arange(len(logp))
    top1 = logp[rows, order[:, 0]]
    top2 = logp[rows, order[:, 1]]
    rival = np.where(np.arange(logp.shape[1])[None, :] == order[:, :1], top2[:, None], top1[:, None])
    return np.maximum(0.0, 1.0 - (logp - rival))


@lru_cache(maxsize=4)
def _grid_tables(k: int, resolution: int):
    pts = _compositions(resolution, k).astype(float) / resolution
    logp = np.log(pts)
    return pts, logp, hinge_matrix(logp)


def conditional_risk(p, q, alpha: float) -> float:
    """Risk of the probabilistic hybrid loss at a single point of the simplex."""
    p = np.asarray(p, dtype=float)
    logp = np.log(p)[None, :]
    q = np.asarray(q, dtype=float)
    value = 0.0
    if alpha > 0:
        value += alpha * float(-(logp[0] @ q))
    if alpha < 1:
        value += (1 - alpha) * float(hinge_matrix(logp)[0] @ q)
    return value


@dataclass
class OracleResult:
    minimizer: np.ndarray
    risk: float
    grid_point: np.ndarray = field(repr=False)
    grid_risk: float = 0.0


def _polish(p: np.ndarray, q: np.ndarray, alpha: float, step: float, floor: float):
    """Pairwise mass-transfer coordinate descent, halving the step on stalls."""
    best = conditional_risk(p, q, alpha)
    k = len(p)
    pairs = [(i, j) for i in range(k) for j in range(k) if i != j]
    while step >= floor:
        improved = False
        for i, j in pairs:
            while True:
                d = min(step, p[j] * 0.5)
                if d <= 0:
                    break
                trial = p.copy()
                trial[i] += d
                trial[j] -= d
                r = conditional_risk(trial, q, alpha)
                if r < best - 1e-15:
                    p, best, improved = trial, r, True
                else:
                    break
        if not improved:
            step *= 0.5
    return p, best


def _snap_ties(p: np.ndarray, q: np.ndarray, alpha: float, risk: float, width: float):
    """Merge near-equal leading coordinates when that does not raise the risk."""
    order = np.argsort(-p, kind="stable")
    for size in range(len(p), 1, -1):
        group = order[:size]
        if p[group].max() - p[group].min() > width:
            continue
        trial = p.copy()
        trial[group] = p[group].mean()
        r = conditional_risk(trial, q, alpha)
        if r <= risk + 1e-12:
            return trial, min(r, risk)
    return p, risk


def simplex_risk_minimizer(loss: LossSpec, q, resolution: int = 100, starts: int = 5,
                           step_floor: float = 1e-6) -> OracleResult:
    q = check_distribution(q)
    k = len(q)
    if k > MAX_ORACLE_LABELS:
        raise ValueError(f"exhaustive simplex oracle supports k <= {MAX_ORACLE_LABELS}; "
                         "use random sampling of the simplex for larger label sets")
    if resolution < 50:
        raise ValueError("resolution must be at least 50 points per simplex edge")
    alpha = loss.alpha
    pts, logp, hinge = _grid_tables(k, resolution)
    risk = np.zeros(len(pts))
    if alpha > 0:
        risk -= alpha * (logp @ q)
    if alpha < 1:
        risk += (1 - alpha) * (hinge @ q)
    # stable argsort keeps the lexicographically smallest grid point first on ties
    candidates = np.argsort(risk, kind="stable")[:starts]
    best_p, best_r = None, np.inf
    for c in candidates:
        p, r = _polish(pts[c].copy(), q, alpha, 1.0 / resolution, step_floor)
        if r < best_r - 1e-15:
            best_p, best_r = p, r
    best_p, best_r = _snap_ties(best_p, q, alpha, best_r, width=100 * step_floor)
    return OracleResult(best_p, best_r, pts[candidates[0]].copy(), float(risk[candidates[0]]))


# --- dominance profile --------------------------------------------------------

@dataclass
class DominanceProfile:
    gold_prob: np.ndarray
    viterbi_prob: np.ndarray

    @property
    def nondominant_count(self) -> int:
        return int(np.sum(self.viterbi_prob <= 0.5))

    @property
    def nondominant_fraction(self) -> float:
        return self.nondominant_count / max(len(self.viterbi_prob), 1)

    def pairs(self) -> list[tuple[float, float]]:
        return list(zip(self.gold_prob.tolist(), self.viterbi_prob.tolist()))


def dominance_profile(model: ChainModel, dataset: Sequence[ChainInstance]) -> DominanceProfile:
    if not dataset:
        return DominanceProfile(np.zeros(0), np.zeros(0))
    batch = ChainBatch(dataset, model.feature_count)
    em = batch.padded_emissions(model)
    log_z = batch_forward_backward(model, batch, em)[0]
    _, vit = batch_viterbi(model, batch, em)
    gold = batch_path_scores(model, batch, batch.gold, em)
    gold_p = np.exp(np.minimum(gold - log_z, 0.0))
    vit_p = np.exp(np.minimum(vit - log_z, 0.0))
    return DominanceProfile(gold_p, np.maximum(vit_p, gold_p))


# --- regularity probes --------------------------------------------------------

class FunctionClassAdapter(Protocol):
    label_count: int

    def sample_input(self, rng: np.random.Generator): ...

    def solve_for_scores(self, x, target: np.ndarray): ...

    def solve_for_mode(self, x, label: int): ...

    def scores(self, weights: np.ndarray, x) -> np.ndarray: ...


class LinearClassAdapter:
    """Linear scorers ``f(x) = Phi(x) w`` with ``Phi(x)`` of shape (k, n)."""

    def __init__(self, feature_map, inputs: Sequence, label_count: int):
        self.feature_map = feature_map
        self.inputs = list(inputs)
        self.label_count = label_count

    def sample_input(self, rng: np.random.Generator):
        return self.inputs[int(rng.integers(len(self.inputs)))]

    def candidate_inputs(self):
        return self.inputs

    def solve_for_scores(self, x, target: np.ndarray):
        phi = np.asarray(self.feature_map(x), dtype=float)
        w, *_ = np.linalg.lstsq(phi, target, rcond=None)
        return w

    def solve_for_mode(self, x, label: int):
        target = np.zeros(self.label_count)
        target[label] = 1.0
        return self.solve_for_scores(x, target)

    def scores(self, weights: np.ndarray, x) -> np.ndarray:
        return np.asarray(self.feature_map(x), dtype=float) @ weights


@dataclass
class RegularityReport:
    score_targets: int
    scores_witnessed: int
    mode_checks: int
    modes_witnessed: int
    max_residual: float

    @property
    def realizes_scores(self) -> bool:
        return self.scores_witnessed == self.score_targets

    @property
    def realizes_modes(self) -> bool:
        return self.modes_witnessed == self.mode_checks


def regularity_probe(adapter, label_count: int, samples: int = 20, seed: int = 0,
                     residual_tol: float = 1e-8) -> RegularityReport:
    """Look for witnesses of the two regularity properties on sampled targets.

    Property (1): some input and weights reproduce a random score vector.
    Property (2): every label can be the unique argmax at every input tried.
    Adapter failures count as "not witnessed".
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    inputs = adapter.candidate_inputs() if hasattr(adapter, "candidate_inputs") else \
        [adapter.sample_input(rng) for _ in range(samples)]
    found = 0
    worst = 0.0
    for _ in range(samples):
        g = rng.normal(size=label_count)
        best = np.inf
        for x in inputs:
            try:
                w = adapter.solve_for_scores(x, g)
                res = float(np.max(np.abs(adapter.scores(w, x) - g)))
            except Exception:
                continue
            best = min(best, res)
            if best <= residual_tol:
                break
        if best <= residual_tol:
            found += 1
        worst = max(worst, best)
    modes = checks = 0
    for x in inputs:
        for y in range(label_count):
            checks += 1
            try:
                s = adapter.scores(adapter.solve_for_mode(x, y), x)
            except Exception:
                continue
            if argmax_set(s) == {y}:
                modes += 1
    return RegularityReport(samples, found, checks, modes, worst)
