"""Mask generation and mask utilities.

Three mask sources feed the objective: a regular spatial grid, Felzenszwalb-
Huttenlocher graph segmentation, and externally supplied (human) annotations.
Everything here is a pure function of its inputs and an explicit RNG.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import dtns


@dataclass
class MaskSet:
    """Binary masks with stable region identities.

    ``masks`` is a boolean ``(R, H, W)`` stack, ``region_ids`` the id of each
    mask. ``valid`` is False for masks that were emptied by a geometric
    transform; freshly generated sets are all valid.
    """

    masks: np.ndarray
    region_ids: np.ndarray
    source: str = "human"
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        self.region_ids = np.asarray(self.region_ids, dtype=np.int64)
        if self.masks.ndim != 3 or len(self.region_ids) != len(self.masks):
            raise ValueError("masks must be (R, H, W) with one region id per mask")
        if len(np.unique(self.region_ids)) != len(self.region_ids):
            raise ValueError("region ids must be unique within a mask set")
        if self.valid is None:
            self.valid = self.masks.any(axis=(1, 2))
        self.valid = np.asarray(self.valid, dtype=bool)

    def __len__(self):
        return len(self.region_ids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.masks.shape[1:]

    def mask(self, region_id: int) -> np.ndarray:
        return self.masks[int(np.flatnonzero(self.region_ids == region_id)[0])]

    def only_valid(self) -> "MaskSet":
        keep = self.valid
        return replace(self, masks=self.masks[keep], region_ids=self.region_ids[keep], valid=self.valid[keep])


# -- label maps -------------------------------------------------------------

def check_labelmap(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2 or labels.size == 0:
        raise ValueError("a label map is a non-empty 2-d array")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("label map must hold integers")
    present = np.unique(labels)
    if present[0] != 0 or present[-1] != len(present) - 1:
        raise ValueError("label ids must form the contiguous range 0..R-1")
    return labels


def relabel_contiguous(labels: np.ndarray) -> np.ndarray:
    """Renumber ids 0..R-1 in raster order of first appearance."""
    flat = labels.ravel()
    _, first = np.unique(flat, return_index=True)
    order = flat[np.sort(first)]
    mapping = np.empty(int(flat.max()) + 1, dtype=np.int32)
    mapping[order] = np.arange(len(order), dtype=np.int32)
    return mapping[labels].astype(np.int32)


def labelmap_to_maskset(labels: np.ndarray, source: str = "human") -> MaskSet:
    labels = check_labelmap(labels)
    r = int(labels.max()) + 1
    masks = labels[None, :, :] == np.arange(r)[:, None, None]
    return MaskSet(masks, np.arange(r), source=source)


# -- spatial grid -----------------------------------------------------------

def object_masks(labels: np.ndarray) -> MaskSet:
    """Masks of the objects in a scene label map: every id except background 0."""
    ms = labelmap_to_maskset(labels)
    keep = ms.region_ids > 0
    return MaskSet(ms.masks[keep], ms.region_ids[keep], source=ms.source)


def cell_bounds(size: int, n: int) -> np.ndarray:
    """Boundaries of n contiguous cells over ``size`` pixels.

    Nearest-integer rounding of ``i * size / n`` on the first half, mirrored on
    the second, so cells differ by at most one pixel and the layout is
    symmetric under flips.
    """
    i = np.arange(n + 1)
    b = (2 * i * size + n) // (2 * n)
    mirror = i > n // 2
    b[mirror] = size - b[n - i[mirror]]
    return b


def grid_labelmap(height: int, width: int, n: int) -> np.ndarray:
    if n < 1 or n > min(height, width):
        raise ValueError(f"grid size {n} out of range for a {height}x{width} image")
    rows = np.searchsorted(cell_bounds(height, n)[1:], np.arange(height), side="right")
    cols = np.searchsorted(cell_bounds(width, n)[1:], np.arange(width), side="right")
    return (rows[:, None] * n + cols[None, :]).astype(np.int32)


def grid_masks(height: int, width: int, n: int) -> MaskSet:
    """n x n tiling of the image into non-overlapping cells."""
    return labelmap_to_maskset(grid_labelmap(height, width, n), source=f"grid({n})")


# -- Felzenszwalb-Huttenlocher ---------------------------------------------

def gaussian_smooth(image: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian, radius ceil(3 sigma), reflected borders, per channel."""
    if sigma <= 0:
        return image.astype(np.float64, copy=True)
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    k /= k.sum()
    out = ndimage.correlate1d(image.astype(np.float64), k, axis=0, mode="reflect")
    return ndimage.correlate1d(out, k, axis=1, mode="reflect")


def pixel_edges(height: int, width: int):
    """8-connected edge list with ``source < target`` (flat raster indices)."""
    idx = np.arange(height * width).reshape(height, width)
    pairs = [
        (idx[:, :-1], idx[:, 1:]),      # right
        (idx[:-1, :], idx[1:, :]),      # down
        (idx[:-1, :-1], idx[1:, 1:]),   # down-right
        (idx[1:, :-1], idx[:-1, 1:]),   # up-right
    ]
    a = np.concatenate([p[0].ravel() for p in pairs])
    b = np.concatenate([p[1].ravel() for p in pairs])
    return np.minimum(a, b), np.maximum(a, b)


class _DisjointSet:
    __slots__ = ("parent", "size")

    def __init__(self, n):
        self.parent = list(range(n))
        self.size = [1] * n

    def find(self, x):
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a, b):
        # union by size; ties attach b under a
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        return a


def fh_segment(image: np.ndarray, scale: float, min_size: int, sigma: float = 0.8) -> np.ndarray:
    """Felzenszwalb-Huttenlocher segmentation into a contiguous label map.

    ``image`` is ``(H, W)`` or ``(H, W, C)`` in [0, 1]; it is rescaled to
    [0, 255] so ``scale`` has the usual 8-bit magnitude. Edges are processed
    in a stable order on (weight, source, target), so the result is fully
    deterministic.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("empty image")
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    if scale <= 0 or min_size < 1 or sigma < 0:
        raise ValueError("need scale > 0, min_size >= 1, sigma >= 0")
    h, w, _ = img.shape
    smooth = gaussian_smooth(img * 255.0, sigma)
    flat = smooth.reshape(h * w, -1)
    src, dst = pixel_edges(h, w)
    weight = np.sqrt(((flat[src] - flat[dst]) ** 2).sum(axis=1))
    order = np.lexsort((dst, src, weight))
    src_l = src[order].tolist()
    dst_l = dst[order].tolist()
    w_l = weight[order].tolist()

    ds = _DisjointSet(h * w)
    find = ds.find
    size = ds.size
    thresh = [float(scale)] * (h * w)
    for a, b, wt in zip(src_l, dst_l, w_l):
        ra, rb = find(a), find(b)
        if ra != rb and wt <= thresh[ra] and wt <= thresh[rb]:
            r = ds.union(ra, rb)
            thresh[r] = wt + scale / size[r]
    for a, b in zip(src_l, dst_l):
        ra, rb = find(a), find(b)
        if ra != rb and (size[ra] < min_size or size[rb] < min_size):
            ds.union(ra, rb)
    roots = np.fromiter((find(i) for i in range(h * w)), dtype=np.int64, count=h * w)
    return relabel_contiguous(roots.reshape(h, w))


# -- downsampling, sampling, quality ---------------------------------------

def downsample_mask(mask: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Average a binary ``(H, W)`` (or ``(..., H, W)``) mask over a grid of footprints."""
    m = np.asarray(mask, dtype=np.float64)
    h, w = m.shape[-2:]
    if not (1 <= grid_h <= h and 1 <= grid_w <= w):
        raise ValueError(f"grid {grid_h}x{grid_w} does not fit a {h}x{w} mask")
    rb, cb = cell_bounds(h, grid_h), cell_bounds(w, grid_w)
    sums = np.add.reduceat(np.add.reduceat(m, rb[:-1], axis=-2), cb[:-1], axis=-1)
    area = np.diff(rb)[:, None] * np.diff(cb)[None, :]
    return sums / area


def sample_region_ids(region_ids, k: int, rng: np.random.Generator) -> np.ndarray:
    region_ids = np.asarray(region_ids)
    if len(region_ids) == 0:
        raise ValueError("cannot sample from an empty mask set")
    if k < 1:
        raise ValueError("k must be >= 1")
    pick = rng.choice(len(region_ids), size=k, replace=len(region_ids) < k)
    return region_ids[pick]


def sample_masks(ms: MaskSet, k: int, rng: np.random.Generator, grid: tuple[int, int] = (7, 7)):
    """k (region_id, soft mask) slots; with replacement only when |ms| < k."""
    ids = sample_region_ids(ms.region_ids, k, rng)
    return [(int(i), downsample_mask(ms.mask(i), *grid)) for i in ids]


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    fa = a.reshape(len(a), -1).astype(np.float64)
    fb = b.reshape(len(b), -1).astype(np.float64)
    inter = fa @ fb.T
    union = fa.sum(1)[:, None] + fb.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def abo(gt: MaskSet, pred: MaskSet) -> float:
    """Average over ground-truth masks of the best IoU with any predicted mask."""
    if len(gt) == 0 or len(pred) == 0:
        raise ValueError("abo needs non-empty mask sets")
    if gt.shape != pred.shape:
        raise ValueError(f"dimension mismatch {gt.shape} vs {pred.shape}")
    return float(iou_matrix(gt.masks, pred.masks).max(axis=1).mean())


# -- ingestion and the on-disk store ---------------------------------------

def load_human_masks(path) -> MaskSet:
    """Rank-2 DTNS label map, or a rank-3 stack of (possibly overlapping) binary masks."""
    arr = dtns.load(path)
    if arr.ndim == 2:
        return labelmap_to_maskset(arr.astype(np.int32), source="human")
    if arr.ndim == 3:
        keep = arr.reshape(len(arr), -1).any(axis=1)
        ids = np.flatnonzero(keep)
        return MaskSet(arr[keep] != 0, ids, source="human")
    raise ValueError(f"{path}: expected a rank-2 or rank-3 tensor")


def default_store_dir(fallback) -> Path:
    return Path(os.environ.get("DETCON_CACHE", fallback))


class MaskStore:
    """Append-only directory of ``<image_id>.dtns`` label maps plus ``index.tsv``."""

    def __init__(self, root):
        self.root = Path(root)
        self.index_path = self.root / "index.tsv"

    def index(self) -> dict[str, tuple[str, str, str]]:
        if not self.index_path.exists():
            return {}
        out = {}
        for line in self.index_path.read_text().splitlines():
            if line.strip():
                image_id, path, source, params = line.split("\t")
                out[image_id] = (path, source, params)
        return out

    def __contains__(self, image_id):
        return image_id in self.index()

    def put(self, image_id: str, labels: np.ndarray, source: str, params: str) -> Path:
        if image_id in self:
            raise KeyError(f"{image_id} already stored")
        rel = f"{image_id}.dtns"
        dtns.save(self.root / rel, np.asarray(labels, dtype=np.int32))
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.index_path, "a") as f:
            f.write(f"{image_id}\t{rel}\t{source}\t{params}\n")
        return self.root / rel

    def get(self, image_id: str) -> np.ndarray:
        rel, _, _ = self.index()[image_id]
        return dtns.load(self.root / rel).astype(np.int32)
