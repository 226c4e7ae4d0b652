"""Paired stochastic augmentation with geometric co-transformation of masks."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from .segmentation import MaskSet

LUMA = np.array([0.299, 0.587, 0.114])
BLUR_KERNEL = 23


@dataclass(frozen=True)
class AugmentDistribution:
    brightness: float
    contrast: float
    saturation: float
    hue: float
    blur_p: float
    solarize_p: float
    crop_p: float = 1.0
    flip_p: float = 0.5
    jitter_p: float = 0.8
    gray_p: float = 0.2
    area_range: tuple[float, float] = (0.08, 1.0)
    ratio_range: tuple[float, float] = (3 / 4, 4 / 3)
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    output_size: int = 224

    def __post_init__(self):
        for name in ("crop_p", "flip_p", "jitter_p", "gray_p", "blur_p", "solarize_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} is not a probability")


# per-variant magnitudes and per-view blur / solarize probabilities
_TABLE = {
    "s": dict(brightness=0.8, contrast=0.8, saturation=0.8, hue=0.2, views=((1.0, 0.0), (0.0, 0.0))),
    "b": dict(brightness=0.4, contrast=0.4, saturation=0.2, hue=0.1, views=((1.0, 0.0), (0.1, 0.2))),
}


def view_distribution(variant: str, view: int, output_size: int = 224) -> AugmentDistribution:
    """Distribution for ``view`` 0 (first view) or 1 (second view) of variant "s" or "b"."""
    row = _TABLE[variant.lower()]
    blur_p, solarize_p = row["views"][view]
    return AugmentDistribution(
        brightness=row["brightness"],
        contrast=row["contrast"],
        saturation=row["saturation"],
        hue=row["hue"],
        blur_p=blur_p,
        solarize_p=solarize_p,
        output_size=output_size,
    )


@dataclass(frozen=True)
class AugmentParams:
    crop: tuple[int, int, int, int]  # top, left, height, width in source pixels
    flip: bool = False
    jitter: tuple[float, float, float, float] | None = None  # brightness, contrast, saturation, hue
    grayscale: bool = False
    blur_sigma: float | None = None
    solarize: bool = False
    output_size: int = 224

    def geometric_only(self) -> "AugmentParams":
        return replace(self, jitter=None, grayscale=False, blur_sigma=None, solarize=False)


def identity_params(height: int, width: int, output_size: int | None = None) -> AugmentParams:
    return AugmentParams(crop=(0, 0, height, width), output_size=output_size or height)


def sample_crop(height: int, width: int, dist: AugmentDistribution, rng: np.random.Generator):
    """Crop rectangle with area fraction uniform in ``area_range``.

    The aspect ratio (w/h) is log-uniform over the part of ``ratio_range``
    that fits the image at the drawn area, so the area marginal stays exactly
    uniform. Falls back to the full image after 10 failed draws.
    """
    area = height * width
    aspect = width / height
    lo, hi = dist.area_range
    for _ in range(10):
        frac = rng.uniform(lo, hi)
        r_lo = max(dist.ratio_range[0], frac * aspect)
        r_hi = min(dist.ratio_range[1], aspect / frac)
        u = rng.uniform()
        if r_lo > r_hi:
            continue
        ratio = math.exp(math.log(r_lo) + u * (math.log(r_hi) - math.log(r_lo)))
        target = frac * area
        h = min(max(int(round(math.sqrt(target / ratio))), 1), height)
        w = min(max(math.ceil(target / h), 1), width)
        if h * w < lo * area:
            continue
        top = int(rng.integers(0, height - h + 1))
        left = int(rng.integers(0, width - w + 1))
        return top, left, h, w
    return 0, 0, height, width


def sample_augment(dist: AugmentDistribution, rng: np.random.Generator, height: int, width: int) -> AugmentParams:
    """Draw one set of augmentation parameters for a ``height x width`` source.

    Every random draw is made unconditionally in a fixed order, so the stream
    consumed per call does not depend on which primitives fire.
    """
    do_crop = rng.uniform() < dist.crop_p
    crop = sample_crop(height, width, dist, rng)
    if not do_crop:
        crop = (0, 0, height, width)
    flip = rng.uniform() < dist.flip_p
    do_jitter = rng.uniform() < dist.jitter_p
    offsets = (
        rng.uniform(-dist.brightness, dist.brightness),
        rng.uniform(-dist.contrast, dist.contrast),
        rng.uniform(-dist.saturation, dist.saturation),
        rng.uniform(-dist.hue, dist.hue),
    )
    gray = rng.uniform() < dist.gray_p
    do_blur = rng.uniform() < dist.blur_p
    sigma = rng.uniform(*dist.blur_sigma_range)
    solarize = rng.uniform() < dist.solarize_p
    return AugmentParams(
        crop=crop,
        flip=bool(flip),
        jitter=tuple(float(o) for o in offsets) if do_jitter else None,
        grayscale=bool(gray),
        blur_sigma=float(sigma) if do_blur else None,
        solarize=bool(solarize),
        output_size=dist.output_size,
    )


# -- geometric primitives ---------------------------------------------------

def _cubic(t, a=-0.5):
    t = np.abs(t)
    return np.where(
        t <= 1,
        (a + 2) * t**3 - (a + 3) * t**2 + 1,
        np.where(t < 2, a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a, 0.0),
    )


def bicubic_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) resampling operator, half-pixel centers, clamped borders."""
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(x).astype(int)
    m = np.zeros((n_out, n_in))
    for off in range(-1, 3):
        idx = base + off
        wts = _cubic(x - idx)
        np.add.at(m, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), wts)
    return m


def nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(((np.arange(n_out) + 0.5) * n_in / n_out).astype(int), n_in - 1)


def resize_bicubic(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h == size and w == size:
        return img.copy()
    rows = np.tensordot(bicubic_matrix(h, size), img, axes=(1, 0))  # (size, w, c)
    return np.tensordot(bicubic_matrix(w, size), rows, axes=(1, 1)).transpose(1, 0, 2)


# -- photometric primitives -------------------------------------------------

def adjust_brightness(img, delta):
    return np.clip(img + delta, 0.0, 1.0)


def adjust_contrast(img, delta):
    mean = img.mean(axis=(0, 1), keepdims=True)
    return np.clip((img - mean) * (1.0 + delta) + mean, 0.0, 1.0)


def adjust_saturation(img, delta):
    hsv = rgb_to_hsv(img)
    hsv[..., 1] = np.clip(hsv[..., 1] * (1.0 + delta), 0.0, 1.0)
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def adjust_hue(img, delta):
    hsv = rgb_to_hsv(img)
    hsv[..., 0] = np.mod(hsv[..., 0] + delta, 1.0)
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def to_grayscale(img):
    y = img @ LUMA
    return np.repeat(y[..., None], img.shape[-1], axis=-1)


def gaussian_blur(img, sigma):
    r = BLUR_KERNEL // 2
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    k /= k.sum()
    out = ndimage.correlate1d(img, k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


def solarize(img):
    return np.where(img < 0.5, img, 1.0 - img)


def apply_to_image(p: AugmentParams, img: np.ndarray) -> np.ndarray:
    """crop, bicubic resize, flip, jitter, grayscale, blur, solarize; output in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    top, left, h, w = p.crop
    out = resize_bicubic(img[top:top + h, left:left + w], p.output_size)
    out = np.clip(out, 0.0, 1.0)
    if p.flip:
        out = out[:, ::-1]
    if p.jitter is not None:
        b, c, s, hue = p.jitter
        out = adjust_brightness(out, b)
        out = adjust_contrast(out, c)
        if out.shape[-1] == 3:
            out = adjust_saturation(out, s)
            out = adjust_hue(out, hue)
    if p.grayscale and out.shape[-1] == 3:
        out = to_grayscale(out)
    if p.blur_sigma is not None:
        out = gaussian_blur(out, p.blur_sigma)
    if p.solarize:
        out = solarize(out)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0))


def apply_to_masks(p: AugmentParams, ms: MaskSet) -> MaskSet:
    """Geometric part only: crop, nearest-neighbour resize, flip.

    Masks emptied by the crop are kept with ``valid`` False.
    """
    top, left, h, w = p.crop
    rows = top + nearest_index(h, p.output_size)
    cols = left + nearest_index(w, p.output_size)
    if p.flip:
        cols = cols[::-1]
    masks = ms.masks[:, rows[:, None], cols[None, :]]
    valid = ms.valid & masks.any(axis=(1, 2))
    return MaskSet(masks, ms.region_ids.copy(), source=ms.source, valid=valid)


def pairing_matrix(ids1, valid1, ids2, valid2) -> np.ndarray:
    """k1 x k2 indicator: same region id and both slots valid."""
    ids1, ids2 = np.asarray(ids1), np.asarray(ids2)
    v1, v2 = np.asarray(valid1, bool), np.asarray(valid2, bool)
    return ((ids1[:, None] == ids2[None, :]) & v1[:, None] & v2[None, :]).astype(np.int8)
