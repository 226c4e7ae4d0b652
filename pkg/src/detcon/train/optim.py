"""LARS optimizer and learning-rate schedules."""
from __future__ import annotations

import math

import numpy as np

from ..model import is_excluded_from_adaptation

LARS_EPS = 1e-9
REFERENCE_BATCH = 4096
PIECEWISE_DROPS = (0.96, 0.98)


def trust_ratio(w: np.ndarray, g: np.ndarray, eps: float = LARS_EPS) -> float:
    wn, gn = float(np.linalg.norm(w)), float(np.linalg.norm(g))
    if wn > 0 and gn > 0:
        return wn / (gn + eps)
    return 1.0


def lars_step(
    params: dict,
    momentum: dict,
    grads: dict,
    lr: float,
    weight_decay: float,
    momentum_coef: float = 0.9,
    eps: float = LARS_EPS,
    adapt: bool = True,
) -> None:
    """One in-place LARS update of ``params`` and the ``momentum`` buffers.

    Per tensor: g = grad + wd * w, eta = |w| / (|g| + eps), mu = m * mu + eta * lr * g,
    w = w - mu.  Biases and normalization scale/shift use eta = 1 and no decay;
    ``adapt=False`` forces eta = 1 everywhere (plain momentum SGD).
    """
    for name, grad in grads.items():
        w = params[name]
        if grad.shape != w.shape:
            raise ValueError(f"gradient shape {grad.shape} does not match {name} {w.shape}")
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        excluded = is_excluded_from_adaptation(name)
        g = grad if excluded else grad + weight_decay * w
        eta = 1.0 if (excluded or not adapt) else trust_ratio(w, g, eps)
        mu = momentum.get(name)
        if mu is None:
            mu = np.zeros_like(w)
        mu = momentum_coef * mu + (eta * lr) * g
        momentum[name] = mu.astype(w.dtype, copy=False)
        params[name] = (w - mu).astype(w.dtype, copy=False)


def scaled_base_lr(base_lr: float, batch: int, reference_batch: int = REFERENCE_BATCH) -> float:
    """Linear scaling rule: base_lr * batch / 4096."""
    return base_lr * batch / reference_batch


def lr_schedule(kind: str, base: float, t: int, total: int) -> float:
    """``base`` is the already-scaled rate.

    cosine: base * (cos(pi t / T) + 1) / 2.
    piecewise: base before 96% of T, base/10 before 98%, base/100 after.
    """
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    if kind == "cosine":
        return base * (math.cos(math.pi * t / total) + 1.0) / 2.0 if total else base
    if kind == "piecewise":
        first, second = (round(f * total) for f in PIECEWISE_DROPS)
        if t < first:
            return base
        if t < second:
            return base / 10.0
        return base / 100.0
    raise ValueError(f"unknown schedule {kind!r}")
