import numpy as np
import pytest
from hypothesis import given, strategies as st

from detcon.train.optim import lars_step, lr_schedule, scaled_base_lr


def test_zero_gradient_is_a_no_op():
    p = {"w": np.array([1.0, -2.0]), "b": np.array([0.5])}
    before = {k: v.copy() for k, v in p.items()}
    lars_step(p, {}, {k: np.zeros_like(v) for k, v in p.items()}, lr=0.1, weight_decay=0.0)
    for k in p:
        assert np.array_equal(p[k], before[k])


def test_scalar_hand_example():
    # eta = |2| / (|1| + 1e-9) ~ 2, update ~ 2 * 0.1 * 1 = 0.2 (eps shifts it by ~2e-10)
    p, mom = {"w": np.array(2.0)}, {}
    lars_step(p, mom, {"w": np.array(1.0)}, lr=0.1, weight_decay=0.0)
    assert float(p["w"]) == pytest.approx(1.8, abs=1e-9)
    assert float(mom["w"]) == pytest.approx(0.2, abs=1e-9)


def test_excluded_parameters_skip_decay_and_trust_ratio():
    p = {"layer.b": np.array([3.0]), "enc.0.scale": np.array([2.0])}
    lars_step(p, {}, {"layer.b": np.array([1.0]), "enc.0.scale": np.array([1.0])}, lr=0.1, weight_decay=0.5)
    assert p["layer.b"][0] == pytest.approx(2.9) and p["enc.0.scale"][0] == pytest.approx(1.9)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 1), st.floats(1e-4, 1))
def test_unit_trust_ratio_without_momentum_is_sgd(w, g, wd, lr):
    p = {"w": np.array([w])}
    lars_step(p, {}, {"w": np.array([g])}, lr=lr, weight_decay=wd, momentum_coef=0.0, adapt=False)
    assert p["w"][0] == pytest.approx(w - lr * (g + wd * w), abs=1e-12)


def test_momentum_accumulates():
    p, mom = {"w": np.array([1.0])}, {}
    for _ in range(2):
        lars_step(p, mom, {"w": np.array([1.0])}, lr=0.1, weight_decay=0.0, adapt=False)
    assert p["w"][0] == pytest.approx(1.0 - 0.1 - 0.19)


def test_nan_gradient_rejected():
    with pytest.raises(FloatingPointError):
        lars_step({"w": np.ones(2)}, {}, {"w": np.array([1.0, np.nan])}, lr=0.1, weight_decay=0.0)


def test_lr_examples():
    assert lr_schedule("cosine", 1.0, 0, 100) == 1.0
    assert lr_schedule("cosine", 1.0, 100, 100) == 0.0
    assert lr_schedule("piecewise", 1.0, 970, 1000) == pytest.approx(0.1)
    assert lr_schedule("piecewise", 1.0, 959, 1000) == 1.0
    assert lr_schedule("piecewise", 1.0, 960, 1000) == pytest.approx(0.1)
    assert lr_schedule("piecewise", 1.0, 980, 1000) == pytest.approx(0.01)
    assert scaled_base_lr(0.3, 256) == pytest.approx(0.01875, abs=1e-15)
    with pytest.raises(ValueError):
        lr_schedule("cosine", 1.0, 101, 100)


@given(st.integers(1, 5000))
def test_schedule_shapes(total):
    ts = range(0, total + 1, max(1, total // 97))
    cos = [lr_schedule("cosine", 0.5, t, total) for t in ts]
    assert all(b <= a for a, b in zip(cos, cos[1:]))
    if total >= 50:
        vals = {lr_schedule("piecewise", 0.5, t, total) for t in range(total + 1)}
        assert len(vals) == 3
