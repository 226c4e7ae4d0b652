import math

import numpy as np
import pytest

from detcon import tensorcore as tc
from detcon.gradcheck import op_graph, op_shapes
from detcon.tensorcore import Graph, backward, check_gradients


def test_op_set_membership():
    ops = tc.op_set()
    assert "matmul" in ops
    assert "mask-weighted-pool" in ops
    assert "attention" not in ops
    assert len(ops) == len(set(ops)) == 18


def test_square_gradient():
    g = Graph()
    x = g.param("x", np.array(3.0))
    y = tc.ew_mul(x, x)
    assert backward(g, y)["x"] == pytest.approx(6.0)


def test_untouched_param_gets_zero_gradient():
    g = Graph()
    x = g.param("x", np.array([1.0, 2.0]))
    g.param("unused", np.ones((2, 3)))
    out = tc.softmax_xent(tc.matmul(g.constant(np.ones((1, 2))), g.constant(np.eye(2))), [0])
    tc.ew_mul(x, x)  # not part of out
    grads = backward(g, out)
    assert np.array_equal(grads["unused"], np.zeros((2, 3)))
    assert np.array_equal(grads["x"], np.zeros(2))


def test_backward_rejects_non_scalar():
    g = Graph()
    x = g.param("x", np.ones(3))
    with pytest.raises(ValueError):
        backward(g, tc.relu(x))


def test_relu_matmul_matches_central_differences():
    rng = np.random.default_rng(0)
    g = Graph()
    w = g.param("W", rng.normal(size=(4, 4)))
    u = g.constant(rng.normal(size=(4, 1)))
    h = tc.relu(tc.matmul(w, u))
    out = tc.matmul(g.constant(np.ones((1, 4))), h)
    assert check_gradients(g, 1e-5, output=out) < 1e-6


def test_mask_pool_uniform_weights_spread_gradient_evenly():
    g = Graph()
    h = g.param("h", np.arange(2 * 3 * 3 * 2, dtype=float).reshape(2, 3, 3, 2))
    pooled = tc.mask_weighted_pool(h, np.ones((2, 1, 3, 3)))
    gup = np.array([[1.0, -2.0], [0.5, 4.0]])
    # sum(pooled * gup) so the pooled-vector gradient is exactly gup
    prod = tc.ew_mul(pooled, g.constant(gup))
    total = tc.matmul(tc.matmul(g.constant(np.ones((1, 2))), prod), g.constant(np.ones((2, 1))))
    grads = backward(g, total)["h"]
    for b in range(2):
        assert np.allclose(grads[b], np.broadcast_to(gup[b] / 9.0, (3, 3, 2)))


def test_l2_rescale_zero_vector_is_an_error():
    g = Graph()
    x = g.param("x", np.zeros((1, 3)))
    with pytest.raises(tc.DegenerateInputError):
        tc.l2_rescale(x, 0.1)


def test_non_finite_forward_is_an_error():
    g = Graph()
    x = g.param("x", np.array([800.0]))
    with pytest.raises(tc.NonFiniteError):
        tc.exp(x)


def test_check_gradients_epsilon_range():
    g = Graph()
    x = g.param("x", np.ones((1, 1)))
    tc.matmul(x, x)
    with pytest.raises(ValueError):
        check_gradients(g, 0.1)
    with pytest.raises(ValueError):
        check_gradients(g, 0.0)


def test_check_gradients_requires_float64():
    g = Graph(np.float32)
    x = g.param("x", np.ones((1, 1)))
    tc.matmul(x, x)
    with pytest.raises(TypeError):
        check_gradients(g, 1e-5)


def test_linear_layer_gradcheck():
    rng = np.random.default_rng(1)
    g = Graph()
    x = g.constant(rng.normal(size=(5, 6)))
    w = g.param("w", rng.normal(size=(6, 3)))
    b = g.param("b", rng.normal(size=3))
    y = tc.add(tc.matmul(x, w), b)
    out = tc.softmax_xent(y, [0, 1, 2, 0, 1])
    assert check_gradients(g, 1e-5, output=out) < 1e-6


def test_conv3x3_on_8x8_gradcheck():
    rng = np.random.default_rng(2)
    g = Graph()
    x = g.param("x", rng.normal(size=(2, 8, 8, 3)))
    w = g.param("w", rng.normal(size=(3, 3, 3, 4)) * 0.3)
    y = tc.conv2d(x, w, stride=1, pad=1)
    out = tc.softmax_xent(tc.spatial_mean(y), [0, 3])
    assert check_gradients(g, 1e-5, output=out) < 1e-5


# --- every op against central differences on three shapes -----------------



@pytest.mark.parametrize("op", tc.op_set())
def test_every_op_matches_central_differences(op):
    rng = np.random.default_rng(sum(map(ord, op)))
    for shape in op_shapes(op):
        g, out = op_graph(op, shape, rng)
        assert check_gradients(g, 1e-5, output=out) < 1e-5, (op, shape)


def test_softmax_xent_matches_naive_reference():
    rng = np.random.default_rng(3)
    for _ in range(50):
        n = int(rng.integers(2, 10))
        z = rng.uniform(-20, 20, size=(1, n))
        t = int(rng.integers(0, n))
        g = Graph()
        out = tc.softmax_xent(g.constant(z), [t])
        naive = -math.log(math.exp(z[0, t]) / sum(math.exp(v) for v in z[0]))
        assert abs(float(out.value) - naive) < 1e-9


def test_backward_is_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(5)
        g = Graph()
        x = g.param("x", rng.normal(size=(2, 8, 8, 3)))
        w = g.param("w", rng.normal(size=(3, 3, 3, 4)))
        y = tc.relu(tc.conv2d(x, w, stride=2, pad=1))
        out = tc.softmax_xent(tc.spatial_mean(y), [0, 1])
        return backward(g, out)

    a, b = run(), run()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()


def test_evaluate_does_not_mutate_values():
    g = Graph()
    x = g.param("x", np.array([[1.0, 2.0]]))
    y = tc.scale(x, 2.0)
    before = y.value.copy()
    assert np.allclose(g.evaluate(y, {"x": np.array([[3.0, 4.0]])}), [[6.0, 8.0]])
    assert np.array_equal(y.value, before)
