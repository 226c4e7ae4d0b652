"""Central-difference gradient checks: per-op graphs and an end-to-end contrastive-detection graph."""
from __future__ import annotations

import numpy as np

from . import tensorcore as tc
from .tensorcore import Graph, check_gradients


def scalarize(g, node, rng):
    """Reduce any node to a scalar via a fixed random projection and a softmax-xent."""
    v = node
    if v.value.ndim == 4:
        v = tc.spatial_mean(v)
    proj = g.constant(rng.normal(size=(v.shape[1], 3)))
    logits = tc.matmul(v, proj)
    return tc.softmax_xent(logits, np.arange(logits.shape[0]) % 3)


def op_graph(op: str, shape: tuple, rng: np.random.Generator):
    """Small float64 graph exercising ``op`` on inputs of ``shape``; returns (graph, scalar output)."""
    g = Graph(np.float64)
    if op == "matmul":
        a = g.param("a", rng.normal(size=shape))
        b = g.param("b", rng.normal(size=(shape[1], 2)))
        out = tc.matmul(a, b)
    elif op == "add":
        a = g.param("a", rng.normal(size=shape))
        v = g.param("v", rng.normal(size=shape[-1]))
        out = tc.add(a, v)
    elif op == "mul-by-scalar":
        out = tc.scale(g.param("a", rng.normal(size=shape)), -1.7)
    elif op in ("elementwise-add", "elementwise-sub", "elementwise-mul"):
        a = g.param("a", rng.normal(size=shape))
        b = g.param("b", rng.normal(size=shape))
        out = {"elementwise-add": tc.ew_add, "elementwise-sub": tc.ew_sub, "elementwise-mul": tc.ew_mul}[op](a, b)
    elif op == "relu":
        x = rng.normal(size=shape)
        x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
        out = tc.relu(g.param("a", x))
    elif op == "conv2d":
        b, h, w, c = shape
        x = g.param("x", rng.normal(size=shape))
        k = g.param("k", rng.normal(size=(3, 3, c, 2)) * 0.4)
        out = tc.conv2d(x, k, stride=2, pad=1)
    elif op == "average-pool":
        out = tc.average_pool(g.param("x", rng.normal(size=shape)), 2)
    elif op == "spatial-mean":
        out = tc.spatial_mean(g.param("x", rng.normal(size=shape)))
    elif op == "mask-weighted-pool":
        b, h, w, d = shape
        wts = rng.uniform(0, 1, size=(b, 3, h, w))
        out = tc.mask_weighted_pool(g.param("x", rng.normal(size=shape)), wts)
    elif op == "l2-rescale":
        out = tc.l2_rescale(g.param("x", rng.normal(size=shape)), 0.1)
    elif op == "exp":
        out = tc.exp(g.param("x", rng.normal(size=shape)))
    elif op == "log":
        out = tc.log(g.param("x", rng.uniform(0.5, 2.0, size=shape)))
    elif op == "softmax-cross-entropy-with-logits":
        z = g.param("z", rng.normal(size=shape) * 3)
        adm = rng.uniform(size=shape) < 0.7
        tgt = np.arange(shape[0]) % shape[1]
        adm[np.arange(shape[0]), tgt] = True
        return g, tc.softmax_xent(z, tgt, adm, rng.uniform(0.5, 1.5, size=shape[0]))
    elif op == "gather-rows":
        x = g.param("x", rng.normal(size=shape))
        out = tc.gather_rows(x, rng.integers(0, shape[0], size=shape[0] + 2))
    elif op == "concat":
        a = g.param("a", rng.normal(size=shape))
        b = g.param("b", rng.normal(size=(shape[0] + 1,) + shape[1:]))
        out = tc.concat([a, b], axis=0)
    elif op == "standardize":
        x = g.param("x", rng.normal(size=shape))
        gam = g.param("gamma", rng.normal(size=shape[-1]))
        bet = g.param("beta", rng.normal(size=shape[-1]))
        out = tc.standardize(x, gam, bet)
    else:
        raise ValueError(f"unknown op {op!r}")
    return g, scalarize(g, out, rng)


SHAPES = {
    "matmul": [(1, 3), (4, 5), (7, 2)],
    "conv2d": [(1, 4, 4, 1), (2, 6, 6, 3), (1, 8, 5, 2)],
    "average-pool": [(1, 2, 2, 1), (2, 4, 6, 3), (1, 8, 8, 2)],
    "spatial-mean": [(1, 1, 1, 2), (2, 3, 4, 3), (3, 5, 5, 1)],
    "mask-weighted-pool": [(1, 1, 1, 2), (2, 3, 3, 4), (1, 7, 7, 3)],
    "softmax-cross-entropy-with-logits": [(1, 2), (4, 6), (9, 3)],
    "standardize": [(2, 3), (2, 4, 4, 3), (3, 2, 5, 4)],
}
DEFAULT_SHAPES = [(1, 2), (3, 4), (5, 7)]


def op_shapes(op: str) -> list[tuple]:
    return SHAPES.get(op, DEFAULT_SHAPES)


def check_op(op: str, epsilon: float = 1e-5) -> float:
    """Worst relative error for ``op`` over its three test shapes."""
    rng = np.random.default_rng(sum(map(ord, op)))
    worst = 0.0
    for shape in op_shapes(op):
        g, out = op_graph(op, shape, rng)
        worst = max(worst, check_gradients(g, epsilon, output=out))
    return worst


def detcon_graph(seed: int = 0, batch: int = 2, k: int = 4, size: int = 16, variant: str = "s"):
    """End-to-end loss graph: toy encoder -> mask pooling -> heads -> rescale -> loss (float64)."""
    from .loss import LossConfig, detcon_loss_graph
    from .model import EncoderConfig, bind, init_params, latents_graph
    from .segmentation import downsample_mask, grid_masks

    rng = np.random.default_rng(seed)
    enc = EncoderConfig(widths=(4, 32), strides=(2, 2), kernels=(3, 3))  # latents of dim 32 // 8 = 4
    grid = enc.grid(size)
    params = init_params(enc, variant, rng, dtype=np.float64)
    for name in params:
        if name.endswith((".b", ".shift")):
            params[name] = rng.normal(0.0, 0.1, size=params[name].shape)
    g = Graph(np.float64)
    nodes = bind(g, params)
    images = rng.uniform(size=(2 * batch, size, size, 3))
    cells = downsample_mask(grid_masks(size, size, 2).masks, grid, grid)  # 4 regions
    ids = np.stack([rng.permutation(4)[:k] if k <= 4 else rng.integers(0, 4, k) for _ in range(batch)])
    soft = np.concatenate([cells[ids], cells[ids]])
    valid = np.ones((2 * batch, k), bool)
    branch = "shared" if variant == "s" else "online"
    lat, valid = latents_graph(nodes, images, soft, valid, enc, branch, 0.1)
    n = batch * k
    a, b = tc.gather_rows(lat, np.arange(n)), tc.gather_rows(lat, np.arange(n, 2 * n))
    pairing = ids[:, :, None] == ids[:, None, :]
    loss, _ = detcon_loss_graph(a, b, (ids, valid[:batch]), (ids, valid[batch:]), pairing, LossConfig())
    return g, loss


def check_detcon(epsilon: float = 1e-5, seed: int = 0, **kw) -> float:
    g, loss = detcon_graph(seed, **kw)
    return check_gradients(g, epsilon, output=loss)
