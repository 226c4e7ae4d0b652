"""Encoder, mask pooling, projection/prediction heads, EMA target, cost model."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .tensorcore import Graph, Node

VARIANTS = ("s", "b")


@dataclass(frozen=True)
class EncoderConfig:
    widths: tuple[int, ...] = (32, 64, 128, 256, 256)
    strides: tuple[int, ...] = (2, 2, 2, 2, 2)
    kernels: tuple[int, ...] = (3, 3, 3, 3, 3)

    def __post_init__(self):
        if not (len(self.widths) == len(self.strides) == len(self.kernels)) or not self.widths:
            raise ValueError("widths, strides and kernels must have the same non-zero length")

    @property
    def total_stride(self) -> int:
        return math.prod(self.strides)

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    def grid(self, resolution: int) -> int:
        if resolution % self.total_stride:
            raise ValueError(f"resolution {resolution} not divisible by total stride {self.total_stride}")
        return resolution // self.total_stride

    @classmethod
    def desk(cls) -> "EncoderConfig":
        """Three stride-2 stages: 64x64 inputs give an 8x8x64 grid."""
        return cls(widths=(16, 32, 64), strides=(2, 2, 2), kernels=(3, 3, 3))


@dataclass(frozen=True)
class HeadDims:
    hidden: int
    out: int
    predictor: bool

    @classmethod
    def for_variant(cls, variant: str, feature_dim: int) -> "HeadDims":
        if variant == "s":
            return cls(hidden=feature_dim, out=max(feature_dim // 8, 1), predictor=False)
        if variant == "b":
            return cls(hidden=2 * feature_dim, out=max(feature_dim // 4, 1), predictor=True)
        raise ValueError(f"unknown variant {variant!r}")


def is_excluded_from_adaptation(name: str) -> bool:
    """Biases and normalization scale/shift skip weight decay and trust-ratio scaling."""
    return name.endswith((".b", ".scale", ".shift"))


def _he(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def init_params(cfg: EncoderConfig, variant: str, rng: np.random.Generator, dtype=np.float32) -> dict:
    params = {}
    c_in = 3
    for i, (c, k) in enumerate(zip(cfg.widths, cfg.kernels)):
        params[f"enc.{i}.w"] = _he(rng, (k, k, c_in, c), k * k * c_in)
        params[f"enc.{i}.scale"] = np.ones(c)
        params[f"enc.{i}.shift"] = np.zeros(c)
        c_in = c
    dims = HeadDims.for_variant(variant, cfg.feature_dim)
    _mlp_params(params, "proj", cfg.feature_dim, dims.hidden, dims.out, rng)
    if dims.predictor:
        _mlp_params(params, "pred", dims.out, dims.hidden, dims.out, rng)
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


def _mlp_params(params, prefix, d_in, hidden, d_out, rng):
    params[f"{prefix}.0.w"] = _he(rng, (d_in, hidden), d_in)
    params[f"{prefix}.0.b"] = np.zeros(hidden)
    params[f"{prefix}.1.w"] = _he(rng, (hidden, d_out), hidden)
    params[f"{prefix}.1.b"] = np.zeros(d_out)


def target_subset(params: dict) -> dict:
    """The encoder + projection parameters mirrored by the EMA target."""
    return {k: v for k, v in params.items() if k.startswith(("enc.", "proj."))}


# -- graph builders ----------------------------------------------------------

def bind(graph: Graph, params: dict, trainable: bool = True) -> dict[str, Node]:
    """Place ``params`` on ``graph``; frozen copies become constants (no gradient)."""
    if trainable:
        return {k: graph.param(k, v) for k, v in params.items()}
    return {k: graph.constant(v, name=f"frozen/{k}") for k, v in params.items()}


def encoder_graph(nodes: dict[str, Node], x: Node, cfg: EncoderConfig) -> Node:
    h = x
    for i, (s, k) in enumerate(zip(cfg.strides, cfg.kernels)):
        h = tc.conv2d(h, nodes[f"enc.{i}.w"], stride=s, pad=k // 2)
        h = tc.standardize(h, nodes[f"enc.{i}.scale"], nodes[f"enc.{i}.shift"])
        h = tc.relu(h)
    return h


def mlp_graph(nodes: dict[str, Node], prefix: str, x: Node) -> Node:
    h = tc.relu(tc.add(tc.matmul(x, nodes[f"{prefix}.0.w"]), nodes[f"{prefix}.0.b"]))
    return tc.add(tc.matmul(h, nodes[f"{prefix}.1.w"]), nodes[f"{prefix}.1.b"])


def head_graph(nodes: dict[str, Node], pooled: Node, branch: str, tau: float) -> Node:
    """Projection (+ prediction on the online branch of the EMA variant), then rescale.

    ``branch`` is "shared" (same-network variant), "online" or "target".
    """
    z = mlp_graph(nodes, "proj", pooled)
    if branch == "online":
        z = mlp_graph(nodes, "pred", z)
    elif branch not in ("shared", "target"):
        raise ValueError(f"unknown branch {branch!r}")
    return tc.l2_rescale(z, tau)


def pooling_weights(soft_masks: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Soft masks with invalid slots replaced by uniform weights.

    Invalid slots still produce a (finite) latent so batches stay rectangular;
    the loss never admits them, so they receive no gradient.
    """
    w = np.array(soft_masks, dtype=np.float64, copy=True)
    bad = ~np.asarray(valid, bool) | (w.sum(axis=(-2, -1)) <= 0)
    w[bad] = 1.0
    return w


def latents_graph(
    nodes: dict[str, Node],
    images: np.ndarray,
    soft_masks: np.ndarray,
    valid: np.ndarray,
    cfg: EncoderConfig,
    branch: str,
    tau: float,
) -> tuple[Node, np.ndarray]:
    """(B*K, d) rescaled latents for a batch of views and their K mask slots.

    Also returns the slot validity after dropping degenerate slots: a mask
    over a region where every feature is zero projects to a zero vector,
    which cannot be rescaled.  Such rows are marked invalid and their latent
    is copied from a valid row; invalid slots carry no loss and no gradient.
    """
    graph = next(iter(nodes.values())).graph
    h = encoder_graph(nodes, graph.constant(images), cfg)
    pooled = tc.mask_weighted_pool(h, pooling_weights(soft_masks, valid))
    z = mlp_graph(nodes, "proj", pooled)
    if branch == "online":
        z = mlp_graph(nodes, "pred", z)
    elif branch not in ("shared", "target"):
        raise ValueError(f"unknown branch {branch!r}")
    valid = np.asarray(valid, bool).copy()
    degenerate = ~(np.linalg.norm(z.value, axis=1) > 0)
    if degenerate.any():
        if degenerate.all():
            raise tc.DegenerateInputError("every projected latent is zero")
        valid.reshape(-1)[degenerate] = False
        index = np.arange(len(degenerate))
        index[degenerate] = np.flatnonzero(~degenerate)[0]
        z = tc.gather_rows(z, index)
    return tc.l2_rescale(z, tau), valid


# -- array-level conveniences ----------------------------------------------

def encode(params: dict, images: np.ndarray, cfg: EncoderConfig, dtype=np.float64) -> np.ndarray:
    """Feature grid ``(B, Hg, Wg, D)`` (or ``(Hg, Wg, D)`` for a single image)."""
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    if images.ndim != 4 or images.shape[-1] != 3:
        raise ValueError(f"expected (B, H, W, 3) images, got {images.shape}")
    for size in images.shape[1:3]:
        cfg.grid(size)
    g = Graph(dtype)
    nodes = bind(g, {k: v for k, v in params.items() if k.startswith("enc.")}, trainable=False)
    out = encoder_graph(nodes, g.constant(images), cfg).value
    g.clear()
    return out[0] if single else out


def mask_pool(h: np.ndarray, soft_mask: np.ndarray) -> np.ndarray:
    """Weighted mean of an ``(Hg, Wg, D)`` grid under an ``(Hg, Wg)`` soft mask."""
    soft_mask = np.asarray(soft_mask, dtype=np.float64)
    if soft_mask.shape != h.shape[:2]:
        raise ValueError(f"soft mask {soft_mask.shape} does not match grid {h.shape[:2]}")
    total = soft_mask.sum()
    if total <= 0:
        raise tc.DegenerateInputError("soft mask has zero total weight")
    return np.tensordot(soft_mask, h, axes=([0, 1], [0, 1])) / total


def project_and_rescale(params: dict, pooled: np.ndarray, branch: str = "shared", tau: float = 0.1) -> np.ndarray:
    if tau <= 0:
        raise ValueError("tau must be positive")
    pooled = np.atleast_2d(np.asarray(pooled, dtype=np.float64))
    g = Graph(np.float64)
    nodes = bind(g, params, trainable=False)
    out = head_graph(nodes, g.constant(pooled), branch, tau).value
    g.clear()
    return out


# -- EMA target -------------------------------------------------------------

@dataclass
class TrainState:
    params: dict
    variant: str
    total_steps: int
    ema_base: float = 0.99
    shadow: dict | None = None
    momentum: dict = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "b" and self.shadow is None:
            self.shadow = {k: v.copy() for k, v in target_subset(self.params).items()}


def ema_schedule(t: int, total: int, base: float) -> float:
    """Decay annealed from ``base`` at t=0 to 1 at t=total along a cosine."""
    if t < 0 or t > total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return 1.0 - (1.0 - base) * (math.cos(math.pi * t / total) + 1.0) / 2.0


def ema_update(state: TrainState, decay: float | None = None) -> TrainState:
    """shadow <- decay * shadow + (1 - decay) * params on the mirrored subset, in place."""
    if state.variant != "b" or state.shadow is None:
        raise ValueError("EMA update only applies to the EMA-target variant")
    lam = ema_schedule(state.step, state.total_steps, state.ema_base) if decay is None else decay
    for k, xi in state.shadow.items():
        theta = state.params[k]
        state.shadow[k] = (lam * xi + (1.0 - lam) * theta).astype(xi.dtype)
    return state


# -- cost model ---------------------------------------------------------------

@dataclass(frozen=True)
class CostDescriptor:
    backbone_flops: float
    feature_dim: int
    dims: HeadDims
    batch: int
    variant: str


def paper_descriptor(variant: str, backbone_flops: float = 4e9) -> CostDescriptor:
    """ResNet-50-scale geometry: 2048-d features, batch 4096, reference head widths."""
    dims = HeadDims(2048, 128, False) if variant == "s" else HeadDims(4096, 256, True)
    return CostDescriptor(backbone_flops, 2048, dims, 4096, variant)


def desk_descriptor(variant: str, cfg: EncoderConfig, batch: int, resolution: int) -> CostDescriptor:
    return CostDescriptor(
        backbone_flops=encoder_flops(cfg, resolution),
        feature_dim=cfg.feature_dim,
        dims=HeadDims.for_variant(variant, cfg.feature_dim),
        batch=batch,
        variant=variant,
    )


def encoder_flops(cfg: EncoderConfig, resolution: int) -> float:
    """Multiply-accumulates of the conv stages for one image."""
    total, size, c_in = 0, resolution, 3
    for c, s, k in zip(cfg.widths, cfg.strides, cfg.kernels):
        size = -(-size // s)
        total += size * size * k * k * c_in * c
        c_in = c
    return float(total)


def estimate_flops(desc: CostDescriptor, latents: int) -> dict:
    """Extra multiply-accumulate cost of using ``latents`` pooled vectors per image.

    Head cost counts one operation per weight (in_dim * out_dim per layer,
    biases and nonlinearities ignored); loss cost is batch * d * k^2.
    """
    dims = desc.dims
    head = desc.feature_dim * dims.hidden + dims.hidden * dims.out
    if dims.predictor:
        head += dims.out * dims.hidden + dims.hidden * dims.out
    head_overhead = (latents - 1) * head
    loss = desc.batch * dims.out * latents**2
    total = head_overhead + loss
    return {
        "variant": desc.variant,
        "latents": latents,
        "head_flops": head,
        "head_overhead": head_overhead,
        "loss_flops": loss,
        "total_overhead": total,
        "backbone_flops": desc.backbone_flops,
        "percent_of_backbone": 100.0 * total / desc.backbone_flops,
    }
