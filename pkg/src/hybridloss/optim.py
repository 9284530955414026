"""L-BFGS with Armijo backtracking for the regularized empirical risk.

Callers hand over only the data term; ``minimize`` adds ``lam/2 * ||w||^2``
and its gradient ``lam * w``.  Non-differentiable data terms (the hinge) are
fed to the same machinery through subgradients.

At a kink the supplied subgradient need not give a descent direction and the
line search fails.  Before giving up, ``minimize`` searches the
subdifferential for its minimum-norm element (see ``_escape``); a descent
direction comes out of that, or a certificate that the iterate is
stationary.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import nnls

from .losses import LossSpec, batch_objective_terms
from .model import FlatDataset

log = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


class NonFiniteError(FloatingPointError):
    def __init__(self, message: str, iterate: np.ndarray):
        super().__init__(message)
        self.iterate = iterate


@dataclass(frozen=True)
class OptimConfig:
    lam: float = 0.0
    memory: int = 10
    max_iterations: int = 500
    gradient_tolerance: float = 1e-6
    armijo: float = 1e-4
    wolfe: float | None = 0.5
    backtrack: float = 0.5
    max_backtracks: int = 50
    curvature_floor: float = 1e-10
    escape_steps: int = 300
    escape_accept: float = 0.01
    escape_radii: tuple[float, ...] = (1e-6, 1e-9)
    # slow progress over kink_window iterations also triggers an escape attempt
    kink_window: int = 10
    kink_tolerance: float = 1e-10
    # stop when the value improved by less than stall_tolerance * (1 + |f|)
    # over the last stall_window iterations; None disables
    stall_window: int | None = None
    stall_tolerance: float = 1e-9
    # train_flat / train_chain: warm-start through these hinge smoothing temperatures,
    # each stage capped at smoothing_iterations, before the exact problem
    smoothing: tuple[float, ...] = ()
    smoothing_iterations: int = 100
    # cap on the exact stage after smoothing; None keeps max_iterations
    polish_iterations: int | None = None

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.memory < 1 or self.max_iterations < 1 or self.max_backtracks < 1:
            raise ValueError("memory, max_iterations and max_backtracks must be positive")
        if self.gradient_tolerance <= 0:
            raise ValueError("gradient_tolerance must be positive")
        if not 0 < self.backtrack < 1 or not 0 < self.armijo < 1:
            raise ValueError("line-search constants must lie in (0, 1)")
        if self.polish_iterations is not None and self.polish_iterations < 1:
            raise ValueError("polish_iterations must be positive")
        if any(t <= 0 for t in self.smoothing) or self.smoothing_iterations < 1:
            raise ValueError("smoothing temperatures and iterations must be positive")


@dataclass
class OptimResult:
    weights: np.ndarray
    final_value: float
    final_gradient_norm: float
    iterations: int
    converged: bool
    escapes: int = 0
    # stopped by the iteration cap rather than a convergence or stall test
    exhausted: bool = False
    history: list[float] = field(default_factory=list, repr=False)


def _evaluate(objective: Objective, lam: float, w: np.ndarray) -> tuple[float, np.ndarray]:
    value, grad = objective(w)
    value = float(value) + 0.5 * lam * float(w @ w)
    grad = np.asarray(grad, dtype=float) + lam * w
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise NonFiniteError("objective returned a non-finite value or gradient", w.copy())
    return value, grad


def _two_loop(grad: np.ndarray, pairs: deque) -> np.ndarray:
    q = grad.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * (s @ q)
        q -= a * y
        alphas.append(a)
    if pairs:
        s, y, _ = pairs[-1]
        q *= (s @ y) / (y @ y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * (y @ q)
        q += (a - b) * s
    return -q


def _min_norm_hull(atoms: list) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-norm point of the convex hull of ``atoms`` and the atoms it uses.

    Works on the Gram matrix, so the cost depends on the number of atoms
    rather than the dimension.
    """
    g = np.array(atoms)
    scale = max(float(np.max(np.abs(g))), 1e-300)
    gram = (g / scale) @ (g / scale).T
    vals, vecs = np.linalg.eigh(gram)
    root = np.sqrt(np.clip(vals, 0.0, None))[:, None] * vecs.T
    # weights sum to one via a heavily weighted extra equation
    a = np.vstack([root, np.full((1, len(g)), 1e3)])
    b = np.zeros(a.shape[0])
    b[-1] = 1e3
    weights, _ = nnls(a, b, maxiter=50 * len(g) + 100)
    if weights.sum() <= 0:
        return g[0], [0]
    return (weights / weights.sum()) @ g, np.flatnonzero(weights > 0)


def _line_search(objective, lam, w, value, direction, slope, step, config):
    """Armijo backtracking, or weak-Wolfe bracketing when ``config.wolfe`` is set.

    The bracketing variant doubles while the curvature condition fails and
    bisects once Armijo fails; at a kink this pushes the step across the kink
    instead of creeping towards it.
    """
    if config.wolfe is None:
        for _ in range(config.max_backtracks):
            trial = w + step * direction
            t_value, t_grad = _evaluate(objective, lam, trial)
            if t_value <= value + config.armijo * step * slope:
                return trial, t_value, t_grad
            step *= config.backtrack
        return None
    lo, hi = 0.0, np.inf
    best = None
    for _ in range(config.max_backtracks):
        trial = w + step * direction
        t_value, t_grad = _evaluate(objective, lam, trial)
        if t_value > value + config.armijo * step * slope:
            hi = step
        else:
            best = (trial, t_value, t_grad)
            if float(t_grad @ direction) >= config.wolfe * slope:
                return best
            lo = step
        step = 0.5 * (lo + hi) if np.isfinite(hi) else 2.0 * lo
    return best


def _escape(objective, config: OptimConfig, w, value, grad):
    """Step along minus an approximate minimum-norm subgradient.

    Fully corrective Frank-Wolfe on ``min ||z||^2`` over the subdifferential
    at ``w``.  Its linear oracle ``argmin <z, s>`` is the gradient a hair
    away from ``w`` along ``-z``, which picks the subgradient that is worst
    for ``-z``; ``z`` is then re-solved over every subgradient collected.
    Returns ``(step, znorm)`` where ``step`` is ``(w, value, grad)`` or None
    and ``znorm`` the max-norm of the smallest subgradient seen.
    """
    best = float(np.max(np.abs(grad)))
    for radius in config.escape_radii:
        z = grad.copy()
        atoms = [grad]
        for _ in range(config.escape_steps):
            zn = float(np.max(np.abs(z)))
            best = min(best, zn)
            if zn <= config.gradient_tolerance:
                return None, best
            eps = radius * (1.0 + float(np.max(np.abs(w)))) / zn
            s = _evaluate(objective, config.lam, w - eps * z)[1]
            zs = float(z @ s)
            if zs >= config.escape_accept * float(z @ z):
                found = _line_search(objective, config.lam, w, value, -z, -zs, 1.0, config)
                if found is not None:
                    return found, best
                break
            atoms.append(s)
            z, _ = _min_norm_hull(atoms)
    return None, best


def _stalled(history: list[float], config: OptimConfig) -> bool:
    window = config.stall_window
    if window is None or len(history) <= window:
        return False
    return history[-window - 1] - history[-1] < config.stall_tolerance * (1.0 + abs(history[-1]))


def _crawling(history: list[float], since_escape: int, config: OptimConfig) -> bool:
    window = config.kink_window
    if since_escape < window or len(history) <= window:
        return False
    return history[-window - 1] - history[-1] < config.kink_tolerance * (1.0 + abs(history[-1]))


def _accept(found, w, grad, pairs: deque, config: OptimConfig):
    trial, t_value, t_grad = found
    s = trial - w
    y = t_grad - grad
    sy = float(s @ y)
    if sy > config.curvature_floor:
        pairs.append((s, y, 1.0 / sy))
    return trial, t_value, t_grad


def minimize(objective: Objective, config: OptimConfig, initial: Sequence[float]) -> OptimResult:
    w = np.array(initial, dtype=float)
    lam = config.lam
    value, grad = _evaluate(objective, lam, w)
    pairs: deque = deque(maxlen=config.memory)
    history = [value]
    gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
    it = 0
    escapes = 0
    last_escape = 0
    while gnorm > config.gradient_tolerance and it < config.max_iterations:
        direction = _two_loop(grad, pairs)
        slope = float(grad @ direction)
        if not pairs or slope >= 0.0:
            if slope >= 0.0:
                pairs.clear()
            direction = -grad
            slope = float(grad @ direction)
            # first step of unit length, afterwards the quasi-Newton scale takes over
            step = min(1.0, 1.0 / np.sqrt(-slope))
        else:
            step = 1.0
        found = _line_search(objective, lam, w, value, direction, slope, step, config)
        if found is None or _crawling(history, it - last_escape, config):
            if found is not None:
                w, value, grad = _accept(found, w, grad, pairs, config)
                history.append(value)
                it += 1
            last_escape = it
            escaped, znorm = _escape(objective, config, w, value, grad)
            if escaped is None:
                gnorm = min(float(np.max(np.abs(grad))), znorm)
                if found is None or gnorm <= config.gradient_tolerance:
                    log.debug("no descent direction at iteration %d (value %.6g)", it, value)
                    break
                continue
            escapes += 1
            pairs.clear()
            w, value, grad = escaped
        else:
            w, value, grad = _accept(found, w, grad, pairs, config)
        history.append(value)
        gnorm = float(np.max(np.abs(grad)))
        it += 1
        if _stalled(history, config):
            break
    converged = gnorm <= config.gradient_tolerance
    exhausted = not converged and it >= config.max_iterations
    return OptimResult(w, value, gnorm, it, converged, escapes, exhausted, history)


def regularized_batch_objective(spec: LossSpec, dataset, lam: float = 0.0,
                                temperature: float | None = None) -> Objective:
    """Mean per-instance loss over ``dataset`` (data term only).

    ``dataset`` may be a :class:`FlatDataset` or a list of :class:`FlatInstance`.
    The returned objective adds ``lam/2 ||w||^2`` itself when ``lam`` is given, so
    pass ``lam=0`` here when handing it to :func:`minimize` with a nonzero
    ``OptimConfig.lam``.  ``temperature`` smooths the hinge part.
    """
    if isinstance(dataset, FlatDataset):
        data = dataset
    else:
        if not dataset:
            raise ValueError("empty dataset")
        data = FlatDataset.from_instances(list(dataset))
    if len(data) == 0:
        raise ValueError("empty dataset")

    def objective(w: np.ndarray) -> tuple[float, np.ndarray]:
        value, grad = batch_objective_terms(spec, data, w, temperature)
        if lam:
            value += 0.5 * lam * float(w @ w)
            grad = grad + lam * w
        return value, grad

    objective.dimension = data.dimension
    return objective


def train_flat(spec: LossSpec, data: FlatDataset, config: OptimConfig,
               initial: np.ndarray | None = None) -> OptimResult:
    """Minimize the regularized risk of ``spec`` on ``data``.

    Nonsmooth losses go through ``config.smoothing`` first when it is set;
    the reported result is always that of the exact objective.
    """
    w = np.zeros(data.dimension) if initial is None else initial
    return minimize_smoothed(lambda t: regularized_batch_objective(spec, data, temperature=t),
                             spec, config, w)


def minimize_smoothed(make_objective, spec: LossSpec, config: OptimConfig, initial) -> OptimResult:
    """Run ``config.smoothing`` stages, then the exact objective.

    ``make_objective(temperature)`` builds the objective, with ``None``
    meaning unsmoothed.  Pure log loss skips the smoothing stages.
    """
    w = np.asarray(initial, dtype=float)
    if spec.alpha < 1.0 and config.smoothing:
        stage = replace(config, max_iterations=config.smoothing_iterations)
        for t in config.smoothing:
            w = minimize(make_objective(t), stage, w).weights
        if config.polish_iterations is not None:
            config = replace(config, max_iterations=config.polish_iterations)
    return minimize(make_objective(None), config, w)
