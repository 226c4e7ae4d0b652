import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from detcon import tensorcore as tc
from detcon.model import (
    EncoderConfig,
    HeadDims,
    TrainState,
    bind,
    ema_schedule,
    ema_update,
    encode,
    estimate_flops,
    init_params,
    mask_pool,
    paper_descriptor,
    project_and_rescale,
)


def _params(cfg, variant="s", seed=0):
    return init_params(cfg, variant, np.random.default_rng(seed), dtype=np.float64)


def test_encode_geometry():
    cfg = EncoderConfig()
    p = _params(cfg)
    rng = np.random.default_rng(0)
    assert encode(p, rng.uniform(size=(224, 224, 3)), cfg).shape == (7, 7, 256)
    assert encode(p, rng.uniform(size=(1, 448, 448, 3)), cfg).shape == (1, 14, 14, 256)
    toy = EncoderConfig(widths=(8, 16), strides=(4, 8), kernels=(3, 3))
    assert encode(_params(toy), rng.uniform(size=(32, 32, 3)), toy).shape == (1, 1, 16)


def test_encode_rejects_incompatible_resolution():
    cfg = EncoderConfig.desk()
    with pytest.raises(ValueError):
        encode(_params(cfg), np.zeros((60, 64, 3)), cfg)
    with pytest.raises(ValueError):
        encode(_params(cfg), np.zeros((64, 64)), cfg)


def test_encode_deterministic():
    cfg = EncoderConfig.desk()
    p = _params(cfg)
    x = np.random.default_rng(1).uniform(size=(2, 64, 64, 3))
    assert np.array_equal(encode(p, x, cfg), encode(p, x, cfg))


def test_mask_pool_examples():
    rng = np.random.default_rng(0)
    h = rng.normal(size=(7, 7, 5))
    assert np.allclose(mask_pool(h, np.ones((7, 7))), h.mean(axis=(0, 1)), atol=1e-6)
    onehot = np.zeros((7, 7))
    onehot[2, 5] = 1
    assert np.allclose(mask_pool(h, onehot), h[2, 5])
    h8 = rng.normal(size=(8, 8, 3))
    a = np.zeros((8, 8))
    a[:, :4] = 1
    assert np.allclose((mask_pool(h8, a) + mask_pool(h8, 1 - a)) / 2, h8.mean(axis=(0, 1)))
    with pytest.raises(tc.DegenerateInputError):
        mask_pool(h, np.zeros((7, 7)))
    with pytest.raises(ValueError):
        mask_pool(h, np.ones((6, 7)))


@pytest.mark.parametrize("tau,norm", [(0.1, math.sqrt(10)), (1.0, 1.0)])
def test_rescale_norm(tau, norm):
    cfg = EncoderConfig.desk()
    p = _params(cfg)
    v = project_and_rescale(p, np.random.default_rng(0).normal(size=(9, 64)), tau=tau)
    assert v.shape == (9, 8)
    assert np.allclose(np.linalg.norm(v, axis=1), norm, rtol=1e-6)


def test_shared_branch_is_deterministic_and_branches_differ():
    cfg = EncoderConfig.desk()
    p = _params(cfg, "b")
    hm = np.random.default_rng(2).normal(size=(3, 64))
    assert np.array_equal(project_and_rescale(p, hm), project_and_rescale(p, hm))
    online = project_and_rescale(p, hm, "online")
    target = project_and_rescale(p, hm, "target")
    assert online.shape == target.shape == (3, 16)
    assert not np.allclose(online, target)
    with pytest.raises(ValueError):
        project_and_rescale(p, hm, tau=0.0)


def test_head_dims():
    assert HeadDims.for_variant("s", 256) == HeadDims(256, 32, False)
    assert HeadDims.for_variant("b", 256) == HeadDims(512, 64, True)
    p = _params(EncoderConfig.desk(), "b")
    assert p["pred.0.w"].shape == (16, 128) and p["pred.1.w"].shape == (128, 16)
    assert "pred.0.w" not in _params(EncoderConfig.desk(), "s")


def _state(theta, xi):
    p = {"enc.0.w": np.full(3, theta, dtype=np.float64)}
    return TrainState(p, "b", total_steps=10, shadow={"enc.0.w": np.full(3, xi, dtype=np.float64)})


@pytest.mark.parametrize("lam,expected", [(1.0, 0.0), (0.0, 1.0), (0.99, 0.01)])
def test_ema_update_examples(lam, expected):
    st_ = ema_update(_state(1.0, 0.0), decay=lam)
    assert np.allclose(st_.shadow["enc.0.w"], expected, atol=1e-15)


def test_ema_update_rejects_s_variant():
    with pytest.raises(ValueError):
        ema_update(TrainState({"enc.0.w": np.zeros(1)}, "s", total_steps=1))


def test_shadow_initialised_as_copy_of_mirrored_subset():
    p = _params(EncoderConfig.desk(), "b")
    st_ = TrainState(p, "b", total_steps=5)
    assert set(st_.shadow) == {k for k in p if not k.startswith("pred.")}
    for k, v in st_.shadow.items():
        assert np.array_equal(v, p[k]) and v is not p[k]


def test_ema_schedule_examples():
    assert ema_schedule(0, 100, 0.996) == pytest.approx(0.996, abs=1e-15)
    assert ema_schedule(0, 100, 0.99) == pytest.approx(0.99, abs=1e-15)
    assert ema_schedule(100, 100, 0.99) == 1.0
    assert ema_schedule(50, 100, 0.99) == pytest.approx(0.995, abs=1e-12)
    with pytest.raises(ValueError):
        ema_schedule(101, 100, 0.99)


@given(st.integers(1, 10_000), st.floats(0.0, 1.0))
def test_ema_schedule_monotone_and_bounded(total, base):
    lams = [ema_schedule(t, total, base) for t in np.linspace(0, total, 17).astype(int)]
    assert all(b >= a - 1e-15 for a, b in zip(lams, lams[1:]))
    assert all(base - 1e-15 <= lam <= 1.0 for lam in lams)


def test_flops_paper_dims():
    s = estimate_flops(paper_descriptor("s"), 16)
    assert s["head_flops"] == 4_456_448
    assert 66e6 <= s["head_overhead"] <= 68e6
    assert s["loss_flops"] == 134_217_728
    assert abs(s["total_overhead"] - 201e6) <= 1e6
    b = estimate_flops(paper_descriptor("b"), 16)
    assert abs(b["total_overhead"] - 441e6) <= 2e6
    assert abs(s["percent_of_backbone"] - 5.3) <= 0.5
    assert estimate_flops(paper_descriptor("s"), 1)["head_overhead"] == 0


def test_translation_covariance_on_toy_encoder():
    cfg = EncoderConfig(widths=(4, 6), strides=(2, 2), kernels=(3, 3))
    p = _params(cfg)
    rng = np.random.default_rng(3)
    x = np.zeros((32, 32, 3))
    x[10:18, 8:16] = rng.uniform(size=(8, 8, 3))
    shifted = np.roll(x, (4, 8), axis=(0, 1))
    h, hs = encode(p, x, cfg), encode(p, shifted, cfg)
    # compact support away from the border: shift-by-stride moves the grid by (1, 2) cells
    assert np.allclose(hs[1:, 2:], h[:-1, :-2], atol=1e-10)


def test_frozen_binding_receives_no_gradient():
    g = tc.Graph(np.float64)
    online = bind(g, {"w": np.ones((2, 2))})
    frozen = bind(g, {"w": np.ones((2, 2))}, trainable=False)
    x = g.constant(np.ones((1, 2)))
    y = tc.matmul(tc.matmul(x, online["w"]), frozen["w"])
    out = tc.softmax_xent(y, targets=np.array([0]))
    grads = tc.backward(g, out)
    assert set(grads) == {"w"}
