"""Small dense-tensor engine with reverse-mode differentiation.

Values are plain numpy arrays. A :class:`Graph` records every operation as a
node (op kind, input node ids, static attributes, saved activations), so the
graph can be swept backwards for gradients or re-evaluated with perturbed
parameters for finite-difference checks.

Layout conventions: images and feature maps are NHWC, conv kernels are
``(kh, kw, c_in, c_out)``, row-vector batches are ``(rows, features)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a forward value or a gradient."""


class DegenerateInputError(ValueError):
    """An op was evaluated at a point where it is undefined."""


@dataclass(frozen=True)
class OpDef:
    name: str
    forward: Callable
    backward: Callable


_OPS: dict[str, OpDef] = {}


def _register(name):
    def wrap(cls):
        _OPS[name] = OpDef(name, cls.forward, cls.backward)
        return cls
    return wrap


def op_set() -> list[str]:
    """Names of the supported differentiable ops, in registration order."""
    return list(_OPS)


class Node:
    __slots__ = ("graph", "index", "op", "inputs", "attrs", "value", "saved", "name")

    def __init__(self, graph, index, op, inputs, attrs, value, saved, name=None):
        self.graph = graph
        self.index = index
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.saved = saved
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return self.op in ("param", "constant")

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, shape={self.shape})"


class Graph:
    """Tape of nodes in topological (creation) order."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        if self.dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported dtype {self.dtype}")
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}

    def _leaf(self, op, value, name):
        value = np.array(value, dtype=self.dtype)
        if not np.isfinite(value).all():
            raise NonFiniteError(f"non-finite {op} {name!r}")
        value.setflags(write=False)
        node = Node(self, len(self.nodes), op, (), {}, value, None, name)
        self.nodes.append(node)
        return node

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        node = self._leaf("param", value, name)
        self.params[name] = node
        return node

    def constant(self, value, name: str | None = None) -> Node:
        return self._leaf("constant", value, name)

    def apply(self, op: str, *inputs: Node, **attrs) -> Node:
        for x in inputs:
            if x.graph is not self:
                raise ValueError("input belongs to another graph")
        fwd = _OPS[op].forward
        value, saved = fwd([x.value for x in inputs], **attrs)
        value = np.asarray(value, dtype=self.dtype)
        if not np.isfinite(value).all():
            raise NonFiniteError(f"non-finite output from {op}")
        value.setflags(write=False)
        node = Node(self, len(self.nodes), op, tuple(x.index for x in inputs), attrs, value, saved)
        self.nodes.append(node)
        return node

    def clear(self) -> None:
        """Drop the tape.

        Nodes point back at their graph, so a finished tape is a reference
        cycle that only the cyclic collector frees; long loops call this to
        release each step's activations immediately.
        """
        self.nodes.clear()
        self.params.clear()

    def evaluate(self, output: Node, overrides: dict[str, np.ndarray] | None = None) -> np.ndarray:
        """Recompute ``output`` from scratch, substituting parameter values.

        Node values stored on the graph are left untouched.
        """
        overrides = overrides or {}
        values: list[np.ndarray] = []
        for node in self.nodes[: output.index + 1]:
            if node.is_leaf:
                v = overrides.get(node.name, node.value) if node.op == "param" else node.value
                values.append(np.asarray(v, dtype=self.dtype))
            else:
                v, _ = _OPS[node.op].forward([values[i] for i in node.inputs], **node.attrs)
                values.append(np.asarray(v, dtype=self.dtype))
        return values[output.index]


def backward(graph: Graph, output: Node) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``output`` with respect to every parameter.

    Parameters that do not influence ``output`` map to zero arrays.
    """
    if output.value.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
    for node in reversed(graph.nodes[: output.index + 1]):
        g = grads.pop(node.index, None)
        if g is None or node.is_leaf:
            if g is not None:
                grads[node.index] = g
            continue
        inputs = [graph.nodes[i].value for i in node.inputs]
        in_grads = _OPS[node.op].backward(g, inputs, node.value, node.saved, **node.attrs)
        for i, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            if not np.isfinite(gi).all():
                raise NonFiniteError(f"non-finite gradient flowing out of {node.op}")
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    out = {}
    for name, p in graph.params.items():
        g = grads.get(p.index)
        out[name] = np.zeros_like(p.value) if g is None else np.asarray(g, dtype=graph.dtype)
    return out


def check_gradients(
    graph: Graph,
    epsilon: float = 1e-5,
    output: Node | None = None,
    max_coords: int = 10_000,
    seed: int = 0,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between ``backward`` and central differences.

    For each parameter tensor the error is ``|a - n| / max(|a|, |n|, floor)``
    with 2-norms over the tensor's coordinates (a = analytic, n = numeric);
    the maximum over tensors is returned.  A tensor-wise ratio is used
    because coordinates whose true gradient is zero have central differences
    made purely of rounding noise (about one ulp of the output divided by
    2 * epsilon), for which a per-coordinate ratio is meaningless.
    Above ``max_coords`` total coordinates a seeded subset is checked.
    """
    if graph.dtype != np.float64:
        raise TypeError("gradient checks require a float64 graph")
    if not (0.0 < epsilon <= 1e-2):
        raise ValueError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    if output is None:
        output = graph.nodes[-1]
    analytic = backward(graph, output)
    coords = [(name, i) for name, p in graph.params.items() for i in range(p.value.size)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in pick]
    pairs: dict[str, list[tuple[float, float]]] = {}
    for name, i in coords:
        base = graph.params[name].value
        plus = base.copy()
        plus.flat[i] += epsilon
        minus = base.copy()
        minus.flat[i] -= epsilon
        fp = float(graph.evaluate(output, {name: plus}).sum())
        fm = float(graph.evaluate(output, {name: minus}).sum())
        pairs.setdefault(name, []).append((float(analytic[name].flat[i]), (fp - fm) / (2 * epsilon)))
    worst = 0.0
    for values in pairs.values():
        a, n = np.array(values).T
        err = np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor)
        worst = max(worst, float(err))
    return worst


# --------------------------------------------------------------------------
# op definitions: forward(inputs, **attrs) -> (value, saved)
#                 backward(g, inputs, out, saved, **attrs) -> grads per input


def _unbroadcast_rows(g, shape):
    return g.reshape(-1, shape[-1]).sum(axis=0)


@_register("matmul")
class _MatMul:
    @staticmethod
    def forward(xs, transpose_b=False):
        a, b = xs
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError("matmul expects 2-d operands")
        return (a @ (b.T if transpose_b else b)), None

    @staticmethod
    def backward(g, xs, out, saved, transpose_b=False):
        a, b = xs
        if transpose_b:
            return g @ b, g.T @ a
        return g @ b.T, a.T @ g


@_register("add")
class _BiasAdd:
    """x + v where v is a vector along the last axis of x."""

    @staticmethod
    def forward(xs):
        x, v = xs
        if v.ndim != 1 or v.shape[0] != x.shape[-1]:
            raise ValueError(f"bias of shape {v.shape} does not match {x.shape}")
        return x + v, None

    @staticmethod
    def backward(g, xs, out, saved):
        return g, _unbroadcast_rows(g, g.shape)


@_register("mul-by-scalar")
class _Scale:
    @staticmethod
    def forward(xs, c):
        return xs[0] * c, None

    @staticmethod
    def backward(g, xs, out, saved, c):
        return (g * c,)


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


@_register("elementwise-add")
class _EwAdd:
    @staticmethod
    def forward(xs):
        _same_shape(*xs, "elementwise-add")
        return xs[0] + xs[1], None

    @staticmethod
    def backward(g, xs, out, saved):
        return g, g


@_register("elementwise-sub")
class _EwSub:
    @staticmethod
    def forward(xs):
        _same_shape(*xs, "elementwise-sub")
        return xs[0] - xs[1], None

    @staticmethod
    def backward(g, xs, out, saved):
        return g, -g


@_register("elementwise-mul")
class _EwMul:
    @staticmethod
    def forward(xs):
        _same_shape(*xs, "elementwise-mul")
        return xs[0] * xs[1], None

    @staticmethod
    def backward(g, xs, out, saved):
        return g * xs[1], g * xs[0]


@_register("relu")
class _Relu:
    @staticmethod
    def forward(xs):
        return np.maximum(xs[0], 0), None

    @staticmethod
    def backward(g, xs, out, saved):
        return (g * (xs[0] > 0),)


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


@_register("conv2d")
class _Conv2d:
    """im2col convolution; x is (B, H, W, C), w is (kh, kw, C, O)."""

    @staticmethod
    def forward(xs, stride=1, pad=0):
        x, w = xs
        kh, kw, c, o = w.shape
        if x.ndim != 4 or x.shape[-1] != c:
            raise ValueError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
        b, h, wd, _ = x.shape
        ho, wo = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)
        if ho < 1 or wo < 1:
            raise ValueError("conv2d: kernel larger than padded input")
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
        cols = np.empty((b, ho, wo, kh, kw, c), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
        cols = cols.reshape(b * ho * wo, kh * kw * c)
        out = (cols @ w.reshape(-1, o)).reshape(b, ho, wo, o)
        return out, cols

    @staticmethod
    def backward(g, xs, out, cols, stride=1, pad=0):
        x, w = xs
        kh, kw, c, o = w.shape
        b, h, wd, _ = x.shape
        ho, wo = g.shape[1:3]
        g2 = g.reshape(-1, o)
        gw = (cols.T @ g2).reshape(w.shape)
        gcols = (g2 @ w.reshape(-1, o).T).reshape(b, ho, wo, kh, kw, c)
        gxp = np.zeros((b, h + 2 * pad, wd + 2 * pad, c), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
        gx = gxp[:, pad:pad + h, pad:pad + wd, :] if pad else gxp
        return gx, gw


@_register("average-pool")
class _AvgPool:
    """Non-overlapping k x k mean pooling on NHWC input."""

    @staticmethod
    def forward(xs, k):
        x = xs[0]
        b, h, w, c = x.shape
        if h % k or w % k:
            raise ValueError(f"average-pool: {h}x{w} not divisible by {k}")
        return x.reshape(b, h // k, k, w // k, k, c).mean(axis=(2, 4)), None

    @staticmethod
    def backward(g, xs, out, saved, k):
        gx = np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)
        return (gx,)


@_register("spatial-mean")
class _SpatialMean:
    @staticmethod
    def forward(xs):
        return xs[0].mean(axis=(1, 2)), None

    @staticmethod
    def backward(g, xs, out, saved):
        b, h, w, c = xs[0].shape
        gx = np.broadcast_to(g[:, None, None, :] / (h * w), xs[0].shape).copy()
        return (gx,)


@_register("mask-weighted-pool")
class _MaskPool:
    """Weighted spatial mean of (B, H, W, D) features under (B, K, H, W) weights.

    Output rows are ordered image-major: row ``b * K + k``.
    """

    @staticmethod
    def forward(xs, weights):
        h = xs[0]
        b, hh, ww, d = h.shape
        if weights.shape[0] != b or weights.shape[2:] != (hh, ww):
            raise ValueError(f"mask weights {weights.shape} do not match features {h.shape}")
        totals = weights.sum(axis=(2, 3))
        if (totals <= 0).any():
            raise DegenerateInputError("mask-weighted-pool: a mask has zero total weight")
        norm = weights / totals[:, :, None, None]
        out = np.einsum("bkij,bijd->bkd", norm, h)
        return out.reshape(b * weights.shape[1], d), norm

    @staticmethod
    def backward(g, xs, out, norm, weights):
        b, k = norm.shape[:2]
        gx = np.einsum("bkij,bkd->bijd", norm, g.reshape(b, k, -1))
        return (gx,)


@_register("l2-rescale")
class _L2Rescale:
    """Rescale every row to norm 1/sqrt(tau)."""

    @staticmethod
    def forward(xs, tau):
        x = xs[0]
        norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
        if (norms == 0).any():
            raise DegenerateInputError("l2-rescale: zero-norm row")
        s = 1.0 / np.sqrt(tau)
        return x * (s / norms), norms

    @staticmethod
    def backward(g, xs, out, norms, tau):
        x = xs[0]
        s = 1.0 / np.sqrt(tau)
        dot = (x * g).sum(axis=1, keepdims=True)
        return ((s / norms) * (g - x * dot / norms**2),)


@_register("exp")
class _Exp:
    @staticmethod
    def forward(xs):
        with np.errstate(over="ignore"):
            return np.exp(xs[0]), None

    @staticmethod
    def backward(g, xs, out, saved):
        return (g * out,)


@_register("log")
class _Log:
    @staticmethod
    def forward(xs):
        if (xs[0] <= 0).any():
            raise DegenerateInputError("log of a non-positive value")
        return np.log(xs[0]), None

    @staticmethod
    def backward(g, xs, out, saved):
        return (g / xs[0],)


@_register("softmax-cross-entropy-with-logits")
class _SoftmaxXent:
    """Weighted sum over rows of -log softmax(z)[target], restricted to admissible columns.

    ``targets`` holds one column index per row, ``admissible`` is a boolean
    (rows, cols) array (the target column must be admissible) and ``weights``
    scales each row's term. The output is a scalar of shape ().
    """

    @staticmethod
    def forward(xs, targets, admissible, weights):
        z = xs[0]
        rows = np.arange(z.shape[0])
        if not admissible[rows, targets].all():
            raise ValueError("softmax-xent: a target column is not admissible")
        masked = np.where(admissible, z, -np.inf)
        m = masked.max(axis=1, keepdims=True)
        e = np.where(admissible, np.exp(masked - m), 0.0)
        s = e.sum(axis=1, keepdims=True)
        lse = (m + np.log(s))[:, 0]
        per_row = lse - z[rows, targets]
        return np.asarray((weights * per_row).sum()), (e / s, per_row)

    @staticmethod
    def backward(g, xs, out, saved, targets, admissible, weights):
        probs = saved[0]
        grad = probs.copy()
        grad[np.arange(grad.shape[0]), targets] -= 1.0
        return (grad * (weights * g)[:, None],)


@_register("gather-rows")
class _GatherRows:
    @staticmethod
    def forward(xs, index):
        return xs[0][index], None

    @staticmethod
    def backward(g, xs, out, saved, index):
        gx = np.zeros_like(xs[0])
        np.add.at(gx, index, g)
        return (gx,)


@_register("concat")
class _Concat:
    @staticmethod
    def forward(xs, axis=0):
        return np.concatenate(xs, axis=axis), None

    @staticmethod
    def backward(g, xs, out, saved, axis=0):
        splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(g, splits, axis=axis))


@_register("standardize")
class _Standardize:
    """Per-sample standardization over all non-batch axes, then per-channel scale/shift."""

    @staticmethod
    def forward(xs, eps=1e-5):
        x, gamma, beta = xs
        axes = tuple(range(1, x.ndim))
        mu = x.mean(axis=axes, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        return xhat * gamma + beta, (xhat, inv)

    @staticmethod
    def backward(g, xs, out, saved, eps=1e-5):
        x, gamma, beta = xs
        xhat, inv = saved
        axes = tuple(range(1, x.ndim))
        n = np.prod([x.shape[a] for a in axes])
        ggamma = _unbroadcast_rows(g * xhat, g.shape)
        gbeta = _unbroadcast_rows(g, g.shape)
        gx_hat = g * gamma
        gx = inv * (
            gx_hat
            - gx_hat.sum(axis=axes, keepdims=True) / n
            - xhat * (gx_hat * xhat).sum(axis=axes, keepdims=True) / n
        )
        return gx, ggamma, gbeta


# --------------------------------------------------------------------------
# thin wrappers so call sites read like expressions

def matmul(a: Node, b: Node, transpose_b: bool = False) -> Node:
    return a.graph.apply("matmul", a, b, transpose_b=transpose_b)


def add(x: Node, bias: Node) -> Node:
    return x.graph.apply("add", x, bias)


def scale(x: Node, c: float) -> Node:
    return x.graph.apply("mul-by-scalar", x, c=float(c))


def ew_add(a: Node, b: Node) -> Node:
    return a.graph.apply("elementwise-add", a, b)


def ew_sub(a: Node, b: Node) -> Node:
    return a.graph.apply("elementwise-sub", a, b)


def ew_mul(a: Node, b: Node) -> Node:
    return a.graph.apply("elementwise-mul", a, b)


def relu(x: Node) -> Node:
    return x.graph.apply("relu", x)


def conv2d(x: Node, w: Node, stride: int = 1, pad: int = 0) -> Node:
    return x.graph.apply("conv2d", x, w, stride=int(stride), pad=int(pad))


def average_pool(x: Node, k: int) -> Node:
    return x.graph.apply("average-pool", x, k=int(k))


def spatial_mean(x: Node) -> Node:
    return x.graph.apply("spatial-mean", x)


def mask_weighted_pool(h: Node, weights: np.ndarray) -> Node:
    return h.graph.apply("mask-weighted-pool", h, weights=np.asarray(weights, dtype=h.graph.dtype))


def l2_rescale(x: Node, tau: float) -> Node:
    return x.graph.apply("l2-rescale", x, tau=float(tau))


def exp(x: Node) -> Node:
    return x.graph.apply("exp", x)


def log(x: Node) -> Node:
    return x.graph.apply("log", x)


def softmax_xent(logits: Node, targets, admissible=None, weights=None) -> Node:
    z = logits.value
    targets = np.asarray(targets, dtype=np.intp)
    if admissible is None:
        admissible = np.ones(z.shape, dtype=bool)
    if weights is None:
        weights = np.ones(z.shape[0])
    return logits.graph.apply(
        "softmax-cross-entropy-with-logits",
        logits,
        targets=targets,
        admissible=np.asarray(admissible, dtype=bool),
        weights=np.asarray(weights, dtype=logits.graph.dtype),
    )


def gather_rows(x: Node, index) -> Node:
    return x.graph.apply("gather-rows", x, index=np.asarray(index, dtype=np.intp))


def concat(xs: list[Node], axis: int = 0) -> Node:
    return xs[0].graph.apply("concat", *xs, axis=int(axis))


def standardize(x: Node, gamma: Node, beta: Node, eps: float = 1e-5) -> Node:
    return x.graph.apply("standardize", x, gamma, beta, eps=float(eps))
