"""Synthetic multi-object scenes with ground-truth label maps and shape classes."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .. import dtns
from ..imageio import read_ppm, write_ppm

SHAPES = ("disk", "rectangle", "triangle")
MIN_AREA = 0.05  # every object covers at least this fraction of the canvas before occlusion


@dataclass(frozen=True)
class SceneSpec:
    n_images: int = 500
    size: int = 64
    objects: tuple[int, int] = (1, 3)
    shapes: tuple[str, ...] = SHAPES
    palette: tuple[tuple[float, float, float], ...] | None = None  # None: uniform random colours
    texture: float = 0.05
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.objects
        if self.n_images < 0 or self.size < 8 or not 0 <= lo <= hi:
            raise ValueError("invalid scene spec")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown or not self.shapes:
            raise ValueError(f"unknown shapes {sorted(unknown)}")


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "disk":
        r = rng.uniform(0.13, 0.25) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == "rectangle":
        while True:
            h, w = rng.uniform(0.2, 0.5, size=2) * size
            if h * w >= MIN_AREA * size * size * 1.1:
                break
        top, left = rng.uniform(0, size - h), rng.uniform(0, size - w)
        return (yy >= top) & (yy < top + h) & (xx >= left) & (xx < left + w)
    if kind == "triangle":
        radius = rng.uniform(0.22, 0.35) * size
        cy, cx = rng.uniform(radius, size - radius, size=2)
        angles = rng.uniform(0, 2 * np.pi) + np.array([0, 2, 4]) * np.pi / 3
        py, px = cy + radius * np.sin(angles), cx + radius * np.cos(angles)
        inside = np.ones((size, size), bool)
        for i in range(3):
            j = (i + 1) % 3
            cross = (px[j] - px[i]) * (yy - py[i]) - (py[j] - py[i]) * (xx - px[i])
            inside &= cross >= 0
        return inside
    raise ValueError(kind)


def _texture(rng, size, amplitude):
    noise = ndimage.gaussian_filter(rng.normal(size=(size, size, 3)), sigma=(3, 3, 0), mode="wrap")
    noise /= max(noise.std(), 1e-12)
    return amplitude * noise


def render_scene(spec: SceneSpec, index: int):
    """(image (S, S, 3) float in [0, 1], label map (S, S) int32, classes list)."""
    rng = np.random.default_rng([spec.seed, index])
    size = spec.size
    n_obj = int(rng.integers(spec.objects[0], spec.objects[1] + 1))
    palette = None if spec.palette is None else np.asarray(spec.palette, dtype=np.float64)
    img = np.broadcast_to(rng.uniform(0.0, 1.0, size=3), (size, size, 3)).copy()
    img += _texture(rng, size, spec.texture)
    labels = np.zeros((size, size), np.int32)
    kinds = []
    for j in range(n_obj):  # back to front
        kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
        mask = _shape_mask(kind, size, rng)
        color = palette[int(rng.integers(len(palette)))] if palette is not None else rng.uniform(0, 1, 3)
        img[mask] = color + _texture(rng, size, spec.texture)[mask]
        labels[mask] = j + 1
        kinds.append(kind)
    present = [j + 1 for j in range(n_obj) if (labels == j + 1).any()]
    remap = np.zeros(n_obj + 1, np.int32)
    remap[present] = np.arange(1, len(present) + 1)
    classes = ["background"] + [kinds[j - 1] for j in present]
    return np.clip(img, 0.0, 1.0), remap[labels], classes


def gen_scenes(spec: SceneSpec, out_dir, ppm: bool = False) -> Path:
    """Write ``images/<id>.dtns`` (and ``.ppm`` if asked), ``labels/<id>.dtns`` and ``meta.tsv``."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"dataset directory {out} is not writable")
    meta = []
    for i in range(spec.n_images):
        image_id = f"{i:05d}"
        img, labels, classes = render_scene(spec, i)
        dtns.save(out / "images" / f"{image_id}.dtns", img.astype(np.float32))
        if ppm:
            write_ppm(out / "images" / f"{image_id}.ppm", img)
        dtns.save(out / "labels" / f"{image_id}.dtns", labels)
        meta.append(f"{image_id}\t{','.join(classes)}\n")
    dtns.atomic_write_bytes(out / "meta.tsv", "".join(meta).encode())
    return out


@dataclass
class Dataset:
    ids: list[str]
    images: np.ndarray  # (N, H, W, 3) float64
    labels: np.ndarray | None  # (N, H, W) int32
    classes: list[list[str]] | None

    def __len__(self):
        return len(self.ids)


def load_dataset(root, with_labels: bool = True) -> Dataset:
    root = Path(root)
    meta_path = root / "meta.tsv"
    if meta_path.exists():
        rows = [line.rstrip("\n").split("\t") for line in meta_path.read_text().splitlines() if line.strip()]
        ids = [r[0] for r in rows]
        classes = [r[1].split(",") if len(r) > 1 else [] for r in rows]
    else:
        ids = sorted({p.stem for p in (root / "images").iterdir() if p.suffix in (".dtns", ".ppm")})
        classes = None
    if not ids:
        raise ValueError(f"{root}: empty dataset")
    images = []
    for image_id in ids:
        path = root / "images" / f"{image_id}.dtns"
        images.append(dtns.load(path) if path.exists() else read_ppm(root / "images" / f"{image_id}.ppm"))
    labels = None
    if with_labels and (root / "labels").is_dir():
        labels = np.stack([dtns.load(root / "labels" / f"{i}.dtns") for i in ids]).astype(np.int32)
    return Dataset(ids, np.stack(images).astype(np.float64), labels, classes)
