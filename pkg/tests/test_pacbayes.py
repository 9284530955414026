import itertools
import math

import numpy as np
import pytest

from hybridloss.model import FlatDataset
from hybridloss.pacbayes import (BoundInputs, appendix_bound_rhs, complexity_term,
                                 empirical_margin_error, margin_losses, posterior_mean_margins)


def hand_rhs(norm_sq, m, alpha, delta, emp=0.0):
    inner = norm_sq / 2 + math.log(m + 1) + math.log(1 / (delta * (1 - math.exp(-2))))
    return emp + (alpha * math.sqrt(1 / m) + math.sqrt(inner / (2 * m))) / (1 - alpha)


def test_hand_value():
    want = math.sqrt((math.log(101) + math.log(1 / (0.1 * (1 - math.exp(-2))))) / 200)
    res = appendix_bound_rhs(BoundInputs(0.0, 100, 3, 0.0, 1.0, 0.1))
    assert abs(res.rhs - want) < 1e-12
    assert abs(res.complexity_term - want) < 1e-12
    assert res.metadata["a_surrogate"] == "m+1"


def test_empirical_term_is_mean():
    res = appendix_bound_rhs(BoundInputs(4.0, 50, 2, 0.3, 1.0, 0.05, [0.0, 1.0, 0.5]))
    assert abs(res.rhs - hand_rhs(4.0, 50, 0.3, 0.05, 0.5)) < 1e-12


def test_monotonicity_grid():
    ms = [10, 30, 100, 300, 1000]
    deltas = [0.5, 0.2, 0.1, 0.05, 0.01]
    alphas = [0.0, 0.2, 0.4, 0.6, 0.8]
    for m, d, a in itertools.product(ms, deltas, alphas):
        c = complexity_term(1.0, m, a, d)
        assert np.isfinite(c) and c > 0
        if m != ms[-1]:
            assert complexity_term(1.0, ms[ms.index(m) + 1], a, d) < c
        if d != deltas[-1]:
            assert complexity_term(1.0, m, a, deltas[deltas.index(d) + 1]) > c
        if a != alphas[-1]:
            assert complexity_term(1.0, m, alphas[alphas.index(a) + 1], d) > c


def test_alpha_zero_margin_shape():
    for n, m, d in [(0.0, 10, 0.1), (3.0, 200, 0.01)]:
        assert abs(complexity_term(n, m, 0.0, d) - hand_rhs(n, m, 0.0, d)) < 1e-12


def test_input_validation():
    with pytest.raises(ValueError, match="alpha=1"):
        BoundInputs(0.0, 10, 2, 1.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        BoundInputs(0.0, 10, 2, 0.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        BoundInputs(0.0, 10, 2, 0.0, -1.0, 0.1)


def _data():
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    return FlatDataset.from_observations(x, np.array([0, 1, 0]), 2)


def test_zero_model_errs_everywhere():
    assert empirical_margin_error(np.zeros(4), _data(), 0.5, posterior_samples=1, scale=0.0) == 1.0


def test_large_margin_model():
    w = np.array([10.0, 0.0, 0.0, 10.0])
    # the third instance has margin 10 - 10 = 0; use a model that separates all three
    w = np.array([10.0, 0.0, -5.0, 10.0])
    assert empirical_margin_error(w, _data(), 1e-9, posterior_samples=1, scale=0.0) == 0.0


def test_monte_carlo_matches_reimplementation():
    data = _data()
    w = np.array([0.5, -0.2, 0.1, 0.3])
    rng = np.random.Generator(np.random.PCG64(7))
    total = np.zeros(3)
    for _ in range(20):
        s = data.scores(w + rng.standard_normal(4))
        total += np.array([s[i, g] - s[i, 1 - g] for i, g in enumerate(data.gold)])
    assert np.array_equal(posterior_mean_margins(w, data, 20, seed=7), total / 20)
    assert empirical_margin_error(w, data, 0.3, 20, seed=7) == float(np.mean(total / 20 <= 0.3))


def test_margin_losses():
    w = np.array([1.0, 0.0, 0.0, 1.0])
    assert np.allclose(margin_losses(w, _data(), 1.0), [0.0, 0.0, 1.0])
