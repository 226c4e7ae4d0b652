"""Seeded data pipeline: epoch order, paired views, co-transformed masks, mask slots.

Every random draw is derived from ``(seed, step, image index)`` so any step
can be regenerated in isolation (resuming needs only the step counter), and
results do not depend on how work is split across threads.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..augment import apply_to_image, apply_to_masks, pairing_matrix, sample_augment, view_distribution
from ..model import EncoderConfig
from ..segmentation import (
    MaskSet,
    MaskStore,
    abo,
    downsample_mask,
    fh_segment,
    grid_labelmap,
    labelmap_to_maskset,
    object_masks,
    sample_region_ids,
)
from .config import RunConfig
from .scenes import Dataset

_ORDER_STREAM = 0x0D0E
_VIEW_STREAM = 0
_SLOT_STREAM = 1


def encoder_config(name: str) -> EncoderConfig:
    if name == "desk":
        return EncoderConfig.desk()
    if name == "default":
        return EncoderConfig()
    raise ValueError(f"unknown encoder {name!r}")


def steps_per_epoch(n_images: int, batch: int) -> int:
    """Full batches per epoch; a trailing partial batch is dropped."""
    if n_images < batch:
        raise ValueError(f"dataset of {n_images} images is smaller than one batch of {batch}")
    return n_images // batch


def epoch_order(seed: int, n_images: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, _ORDER_STREAM, epoch]).permutation(n_images)


def batch_indices(seed: int, n_images: int, batch: int, step: int) -> np.ndarray:
    per = steps_per_epoch(n_images, batch)
    epoch, pos = divmod(step, per)
    return epoch_order(seed, n_images, epoch)[pos * batch:(pos + 1) * batch]


def view_rng(seed: int, step: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, index, _VIEW_STREAM])


def slot_rng(seed: int, step: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, index, _SLOT_STREAM])


def sample_views(image: np.ndarray, variant: str, resolution: int, rng: np.random.Generator):
    """Two augmentation parameter sets and the corresponding augmented images."""
    h, w = image.shape[:2]
    p1 = sample_augment(view_distribution(variant, 0, resolution), rng, h, w)
    p2 = sample_augment(view_distribution(variant, 1, resolution), rng, h, w)
    return (p1, p2), (apply_to_image(p1, image), apply_to_image(p2, image))


# -- mask sources --------------------------------------------------------------

def mask_source_label(cfg: RunConfig) -> str:
    if cfg.mask_source == "grid":
        return f"grid({cfg.grid_n})"
    if cfg.mask_source == "fh":
        return f"fh(s={cfg.fh_scale:g},c={cfg.fh_min_size},sigma={cfg.fh_sigma:g})"
    return "human"


def mask_sets(dataset: Dataset, cfg: RunConfig, store_root=None) -> list[MaskSet]:
    """One mask set per image for the configured source.

    FH label maps are cached in a :class:`MaskStore` under ``store_root`` when
    given (one sub-directory per parameter setting).
    """
    label = mask_source_label(cfg)
    h, w = dataset.images.shape[1:3]
    if cfg.mask_source == "grid":
        lab = grid_labelmap(h, w, cfg.grid_n)
        return [labelmap_to_maskset(lab, label) for _ in range(len(dataset))]
    if cfg.mask_source == "human":
        if dataset.labels is None:
            raise ValueError("human mask source needs ground-truth label maps")
        return [labelmap_to_maskset(lab, label) for lab in dataset.labels]
    store = None
    if store_root:
        safe = label.replace("(", "_").replace(")", "").replace(",", "_").replace("=", "")
        store = MaskStore(Path(store_root) / safe)
    out = []
    for image_id, img in zip(dataset.ids, dataset.images):
        if store is not None and image_id in store:
            lab = store.get(image_id)
        else:
            lab = fh_segment(img, cfg.fh_scale, cfg.fh_min_size, cfg.fh_sigma)
            if store is not None:
                store.put(image_id, lab, "fh", label)
        out.append(labelmap_to_maskset(lab, label))
    return out


def mean_abo(dataset: Dataset, masks: list[MaskSet]) -> float | None:
    """Mean over images of ABO(ground-truth objects, mask source).

    Background (label 0) is not an object and images without objects are
    skipped; None when there are no labels or no objects at all.
    """
    if dataset.labels is None:
        return None
    scores = [abo(object_masks(gt), ms) for gt, ms in zip(dataset.labels, masks) if gt.any()]
    return float(np.mean(scores)) if scores else None


# -- batches -----------------------------------------------------------------

@dataclass
class Batch:
    images: np.ndarray  # (2B, R, R, 3): view-1 images then view-2 images
    soft_masks: np.ndarray  # (2B, k, Hg, Wg)
    valid: np.ndarray  # (2, B, k)
    region_ids: np.ndarray  # (B, k), shared by both views
    pairing: np.ndarray  # (B, k, k)
    indices: np.ndarray  # dataset indices


def _one_image(image, ms: MaskSet, variant, resolution, k, grid, seed, step, index):
    (p1, p2), (x1, x2) = sample_views(image, variant, resolution, view_rng(seed, step, index))
    m1, m2 = apply_to_masks(p1, ms), apply_to_masks(p2, ms)
    ids = sample_region_ids(m1.region_ids[m1.valid], k, slot_rng(seed, step, index))
    pos = {int(r): i for i, r in enumerate(ms.region_ids)}
    rows = [pos[int(r)] for r in ids]
    sm1 = downsample_mask(m1.masks[rows], grid, grid)
    sm2 = downsample_mask(m2.masks[rows], grid, grid)
    v1 = m1.valid[rows] & (sm1.sum(axis=(1, 2)) > 0)
    v2 = m2.valid[rows] & (sm2.sum(axis=(1, 2)) > 0)
    return x1, x2, sm1, sm2, v1, v2, ids


def make_batch(dataset: Dataset, masks: list[MaskSet], cfg: RunConfig, enc: EncoderConfig,
               step: int, executor: ThreadPoolExecutor | None = None) -> Batch:
    idx = batch_indices(cfg.seed, len(dataset), cfg.batch_size, step)
    grid = enc.grid(cfg.resolution)
    args = [(dataset.images[i], masks[i], cfg.variant, cfg.resolution, cfg.latents, grid, cfg.seed, step, int(i))
            for i in idx]
    results = list(executor.map(lambda a: _one_image(*a), args)) if executor else [_one_image(*a) for a in args]
    x1, x2, sm1, sm2, v1, v2, ids = (np.stack(c) for c in zip(*results))
    pairing = np.stack([pairing_matrix(r, a, r, b) for r, a, b in zip(ids, v1, v2)]).astype(bool)
    return Batch(
        images=np.concatenate([x1, x2]),
        soft_masks=np.concatenate([sm1, sm2]),
        valid=np.stack([v1, v2]),
        region_ids=ids,
        pairing=pairing,
        indices=idx,
    )
