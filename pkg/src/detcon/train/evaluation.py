"""Frozen-feature evaluation: leave-one-out nearest-neighbour retrieval of object masks."""
from __future__ import annotations

from collections import Counter

import numpy as np

from ..model import EncoderConfig, encode
from ..segmentation import downsample_mask
from .scenes import Dataset


def object_features(params: dict, enc: EncoderConfig, dataset: Dataset, chunk: int = 50, dtype=np.float64):
    """Mask-pooled encoder features for every ground-truth object (label id >= 1).

    Returns ``(features (N, D), class names (N,))``.
    """
    if dataset.labels is None or dataset.classes is None:
        raise ValueError("retrieval evaluation needs label maps and class metadata")
    grid = enc.grid(dataset.images.shape[1]), enc.grid(dataset.images.shape[2])
    feats, names = [], []
    for start in range(0, len(dataset), chunk):
        h = encode(params, dataset.images[start:start + chunk], enc, dtype=dtype).astype(np.float64)
        for offset, hi in enumerate(h):
            i = start + offset
            labels, classes = dataset.labels[i], dataset.classes[i]
            for obj in range(1, int(labels.max()) + 1):
                w = downsample_mask(labels == obj, *grid)
                if w.sum() <= 0:
                    continue
                feats.append(np.tensordot(w, hi, axes=([0, 1], [0, 1])) / w.sum())
                names.append(classes[obj])
    return np.array(feats), np.array(names)


def retrieval_accuracy(features: np.ndarray, classes) -> dict:
    """Leave-one-out 1-NN classification under cosine similarity.

    Ties are broken towards the lowest index.  Raises if any class has fewer
    than two members.
    """
    classes = np.asarray(classes)
    counts = Counter(classes.tolist())
    small = sorted(c for c, n in counts.items() if n < 2)
    if small:
        raise ValueError(f"classes with fewer than 2 objects: {small}")
    f = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(f, axis=1, keepdims=True)
    f = np.divide(f, norms, out=np.zeros_like(f), where=norms > 0)
    sim = f @ f.T
    np.fill_diagonal(sim, -np.inf)
    pred = classes[np.argmax(sim, axis=1)]
    names = sorted(counts)
    pos = {c: i for i, c in enumerate(names)}
    confusion = np.zeros((len(names), len(names)), dtype=np.int64)
    for t, p in zip(classes, pred):
        confusion[pos[t], pos[p]] += 1
    return {
        "accuracy": float(np.mean(pred == classes)),
        "classes": names,
        "confusion": confusion,
        "objects": int(len(classes)),
    }


def eval_retrieval(params: dict, enc: EncoderConfig, dataset: Dataset) -> dict:
    feats, names = object_features(params, enc, dataset)
    return retrieval_accuracy(feats, names)


def format_eval(result: dict) -> str:
    lines = [f"accuracy\t{result['accuracy']!r}", f"objects\t{result['objects']}"]
    lines.append("confusion\t" + "\t".join(result["classes"]))
    for name, row in zip(result["classes"], result["confusion"]):
        lines.append(f"{name}\t" + "\t".join(str(v) for v in row))
    return "\n".join(lines) + "\n"
