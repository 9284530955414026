"""Computable quantities of the PAC-Bayes margin bound for the hybrid loss.

The bound evaluated is::

    E_D[(gamma - M)_+] <= mean_i (gamma - M_i)_+
        + 1/(1-alpha) * ( alpha * sqrt(1/m)
                          + sqrt((KL + ln A + ln(1/(delta (1 - e^-2)))) / (2m)) )

with ``KL = ||w||^2 / 2`` (unit Gaussian prior at 0, unit Gaussian posterior
at w) and ``ln A`` replaced by ``ln(m + 1)``.  That replacement is only known
to hold for the zero-one loss; results carry a flag saying so.  The constant
``c`` of the big-O form is never estimated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .chain import ChainBatch, ChainModel, _competitors, batch_path_scores
from .model import FlatDataset

A_SURROGATE_NOTE = "ln A(alpha, w) replaced by ln(m + 1); proven for the zero-one loss only"


@dataclass(frozen=True)
class BoundInputs:
    weight_norm_sq: float
    sample_size: int
    label_count: int
    alpha: float
    gamma: float
    delta: float
    empirical_margin_losses: Sequence[float] = ()
    posterior_samples: int = 100

    def __post_init__(self):
        if self.alpha >= 1.0:
            raise ValueError("bound undefined at alpha=1: it scales with 1/(1 - alpha)")
        if not 0.0 <= self.alpha:
            raise ValueError("alpha must lie in [0, 1)")
        if not 0.0 < self.delta <= 1.0:
            raise ValueError("delta must lie in (0, 1]")
        if self.sample_size < 1:
            raise ValueError("sample size must be positive")
        if self.weight_norm_sq < 0:
            raise ValueError("squared norm must be non-negative")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


@dataclass(frozen=True)
class BoundResult:
    rhs: float
    empirical_term: float
    complexity_term: float
    kl: float
    log_a: float
    metadata: dict = field(default_factory=dict)


def complexity_term(weight_norm_sq: float, m: int, alpha: float, delta: float) -> float:
    if alpha >= 1.0:
        raise ValueError("bound undefined at alpha=1")
    kl = 0.5 * weight_norm_sq
    log_a = math.log(m + 1)
    conf = math.log(1.0 / (delta * (1.0 - math.exp(-2.0))))
    root = math.sqrt((kl + log_a + conf) / (2.0 * m))
    return (alpha * math.sqrt(1.0 / m) + root) / (1.0 - alpha)


def appendix_bound_rhs(inputs: BoundInputs) -> BoundResult:
    losses = np.asarray(inputs.empirical_margin_losses, dtype=float)
    emp = float(losses.mean()) if losses.size else 0.0
    comp = complexity_term(inputs.weight_norm_sq, inputs.sample_size, inputs.alpha, inputs.delta)
    return BoundResult(emp + comp, emp, comp, 0.5 * inputs.weight_norm_sq,
                       math.log(inputs.sample_size + 1),
                       {"a_surrogate": "m+1", "note": A_SURROGATE_NOTE,
                        "constant_c": "not estimated"})


def _margins(model, dataset, weights: np.ndarray) -> np.ndarray:
    if isinstance(model, ChainModel):
        m = ChainModel.unpack(weights, model.feature_count, model.tag_count)
        em = dataset.padded_emissions(m)
        gold = batch_path_scores(m, dataset, dataset.gold, em)
        _, rival = _competitors(m, dataset, em)
        return gold - rival
    scores = dataset.scores(weights)
    rows = np.arange(len(dataset))
    masked = scores.copy()
    masked[rows, dataset.gold] = -np.inf
    return scores[rows, dataset.gold] - masked.max(axis=1)


def _as_dataset(model, dataset):
    if isinstance(model, ChainModel):
        return dataset if isinstance(dataset, ChainBatch) else ChainBatch(list(dataset), model.feature_count)
    if isinstance(dataset, FlatDataset):
        return dataset
    return FlatDataset.from_instances(list(dataset))


def posterior_mean_margins(model, dataset, posterior_samples: int = 100, seed: int = 0,
                           scale: float = 1.0) -> np.ndarray:
    """Monte Carlo estimate of E_Q M(w', y) per instance, Q = N(w, scale^2 I)."""
    data = _as_dataset(model, dataset)
    w = model.pack() if isinstance(model, ChainModel) else np.asarray(model, dtype=float)
    rng = np.random.Generator(np.random.PCG64(seed))
    total = np.zeros(len(data))
    for _ in range(posterior_samples):
        total += _margins(model, data, w + scale * rng.standard_normal(len(w)))
    return total / posterior_samples


def empirical_margin_error(model, dataset, gamma: float, posterior_samples: int = 100,
                           seed: int = 0, scale: float = 1.0) -> float:
    """Fraction of instances whose posterior-averaged margin is at most ``gamma``."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    avg = posterior_mean_margins(model, dataset, posterior_samples, seed, scale)
    return float(np.mean(avg <= gamma))


def margin_losses(model, dataset, gamma: float) -> np.ndarray:
    """Per-instance ``(gamma - M)_+`` at the point estimate."""
    data = _as_dataset(model, dataset)
    w = model.pack() if isinstance(model, ChainModel) else np.asarray(model, dtype=float)
    return np.maximum(gamma - _margins(model, data, w), 0.0)
