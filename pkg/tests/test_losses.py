import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import finite_difference, relative_error
from hybridloss.losses import (LossSpec, batch_losses, batch_objective_terms, evaluate, hinge_loss,
                               hybrid_loss, log_loss, loss_and_weight_gradient, smoothed_batch_losses)
from hybridloss.model import FeatureVector, FlatDataset, FlatInstance, block_features, margin, softmax

scores_st = arrays(float, st.integers(2, 6), elements=st.floats(-20, 20, allow_nan=False))
SPECS = [LossSpec.log(), LossSpec.hinge(), LossSpec.hybrid(0.3)]


def test_loss_spec_normalizes_alpha():
    assert LossSpec("log", 0.2).alpha == 1.0
    assert LossSpec("hinge", 0.7).alpha == 0.0
    with pytest.raises(ValueError):
        LossSpec("hybrid", 1.5)
    with pytest.raises(ValueError):
        LossSpec("squared")


def test_log_loss_examples():
    assert abs(log_loss([0, 0, 0, 0], 0).value - np.log(4)) < 1e-12
    s = np.log([0.5, 0.25, 0.25])
    assert abs(log_loss(s, 0).value - np.log(2)) < 1e-12


def test_hinge_examples():
    ev = hinge_loss([2, 1, 0], 0)
    assert ev.value == 0 and not ev.score_gradient.any()
    ev = hinge_loss([0, 0, 0], 0)
    assert ev.value == 1 and ev.score_gradient.tolist() == [-1, 1, 0]
    ev = hinge_loss([0, 1, 0], 0)
    assert ev.value == 2 and ev.score_gradient.tolist() == [-1, 1, 0]


def test_hinge_kink_takes_zero_side():
    ev = hinge_loss([1.0, 0.0], 0)
    assert ev.value == 0 and not ev.score_gradient.any()


def test_hybrid_examples():
    s = np.log([0.5, 0.25, 0.25])
    assert abs(hybrid_loss(s, 0, 0.5).value - 0.5) < 1e-12
    r = np.array([0.3, -1.2, 2.0])
    for a, ref in ((1.0, log_loss(r, 1)), (0.0, hinge_loss(r, 1))):
        ev = hybrid_loss(r, 1, a)
        assert ev.value == ref.value
        assert np.array_equal(ev.score_gradient, ref.score_gradient)


def _differentiable(s, y):
    m = margin(s, y)
    others = np.delete(s, y)
    top2 = np.sort(others)[-2:] if len(others) > 1 else others
    return abs(1 - m) > 1e-3 and (len(others) < 2 or top2[1] - top2[0] > 1e-3)


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
def test_score_gradient_finite_difference(spec, rng):
    checked = 0
    while checked < 30:
        s = rng.normal(scale=2, size=int(rng.integers(2, 6)))
        y = int(rng.integers(len(s)))
        if not _differentiable(s, y):
            continue
        fd = finite_difference(lambda v: evaluate(spec, v, y).value, s)
        assert relative_error(evaluate(spec, s, y).score_gradient, fd) < 1e-6
        checked += 1


@given(scores_st, st.data())
def test_hybrid_is_convex_combination(s, data):
    y = data.draw(st.integers(0, len(s) - 1))
    a = data.draw(st.floats(0, 1))
    lg, hg = log_loss(s, y), hinge_loss(s, y)
    ev = hybrid_loss(s, y, a)
    assert abs(ev.value - (a * lg.value + (1 - a) * hg.value)) <= 1e-12 * (1 + lg.value + hg.value)


@given(scores_st, st.data())
def test_loss_signs_and_gradient_sum(s, data):
    y = data.draw(st.integers(0, len(s) - 1))
    lg = log_loss(s, y)
    assert lg.value >= 0 and hinge_loss(s, y).value >= 0
    assert abs(lg.score_gradient.sum()) < 1e-12


@given(scores_st, st.data())
def test_convexity_probe(s1, data):
    s2 = data.draw(arrays(float, len(s1), elements=st.floats(-20, 20, allow_nan=False)))
    y = data.draw(st.integers(0, len(s1) - 1))
    t = data.draw(st.floats(0.01, 0.99))
    for spec in SPECS:
        f = lambda v: evaluate(spec, v, y).value
        assert f(t * s1 + (1 - t) * s2) <= t * f(s1) + (1 - t) * f(s2) + 1e-10


def test_weight_gradient_examples():
    inst = FlatInstance((FeatureVector({0: 1.0}, 2), FeatureVector({1: 1.0}, 2)), 0)
    w = np.array([0.3, -0.4])
    value, grad = loss_and_weight_gradient(LossSpec.log(), w, inst)
    p = softmax(w)
    assert np.allclose(grad, p - [1, 0])
    _, g0 = loss_and_weight_gradient(LossSpec.hinge(), np.array([5.0, 0.0]), inst)
    assert not g0.any()


@pytest.mark.parametrize("spec", SPECS, ids=lambda s: s.kind)
def test_weight_gradient_finite_difference(spec, rng):
    checked = 0
    while checked < 20:
        inst = FlatInstance(block_features(rng.normal(size=3), 3), int(rng.integers(3)))
        w = rng.normal(size=9)
        from hybridloss.model import score_flat
        if not _differentiable(score_flat(w, inst), inst.gold_label):
            continue
        fd = finite_difference(lambda v: loss_and_weight_gradient(spec, v, inst)[0], w)
        assert relative_error(loss_and_weight_gradient(spec, w, inst)[1], fd) < 1e-6
        checked += 1


@pytest.mark.parametrize("spec", SPECS + [LossSpec.hybrid(0.8)], ids=lambda s: f"{s.kind}{s.alpha}")
def test_batch_matches_per_row(spec, rng):
    s = rng.normal(size=(30, 4))
    s[:5] = 0.0
    y = rng.integers(0, 4, size=30)
    values, grad = batch_losses(spec, s, y)
    for i in range(30):
        ev = evaluate(spec, s[i], int(y[i]))
        assert abs(values[i] - ev.value) < 1e-12
        assert np.allclose(grad[i], ev.score_gradient, atol=1e-12)


def test_batch_objective_matches_instances(rng):
    x = rng.normal(size=(10, 3))
    y = rng.integers(0, 3, size=10)
    data = FlatDataset.from_observations(x, y, 3)
    w = rng.normal(size=9)
    for spec in SPECS:
        v, g = batch_objective_terms(spec, data, w)
        pairs = [loss_and_weight_gradient(spec, w, data.instance(i)) for i in range(10)]
        assert abs(v - np.mean([p[0] for p in pairs])) < 1e-12
        assert np.allclose(g, np.mean([p[1] for p in pairs], axis=0), atol=1e-12)


@given(arrays(float, (5, 4), elements=st.floats(-10, 10, allow_nan=False)),
       arrays(np.int64, 5, elements=st.integers(0, 3)), st.floats(1e-3, 1.0), st.floats(0, 0.99))
def test_smoothed_hinge_is_a_tight_upper_bound(s, y, tau, alpha):
    spec = LossSpec("hybrid", alpha) if alpha > 0 else LossSpec.hinge()
    exact, _ = batch_losses(spec, s, y)
    smooth, _ = smoothed_batch_losses(spec, s, y, tau)
    assert np.all(smooth >= exact - 1e-9)
    assert np.all(smooth <= exact + (1 - alpha) * tau * np.log(4) + 1e-9)


def test_smoothed_gradient_finite_difference(rng):
    y = rng.integers(0, 4, size=6)
    for spec in (LossSpec.hinge(), LossSpec.hybrid(0.4)):
        s = rng.normal(size=(6, 4))
        f = lambda v: smoothed_batch_losses(spec, v.reshape(6, 4), y, 0.1)[0].sum()
        g = smoothed_batch_losses(spec, s, y, 0.1)[1]
        assert relative_error(g.ravel(), finite_difference(f, s.ravel())) < 1e-6
