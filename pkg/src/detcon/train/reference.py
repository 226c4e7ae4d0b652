"""Independent global-instance contrastive trainer.

Written without masks, pairing matrices or the contrastive-detection loss:
each view is encoded, spatially averaged, projected and rescaled, and every
latent must identify its partner view among the other 2B - 1 latents of the
batch.  With one full-image mask per image the mask-based trainer must
reproduce this exactly (when negatives come from both views).
"""
from __future__ import annotations

import numpy as np

from .. import tensorcore as tc
from ..model import TrainState, bind, encoder_graph, mlp_graph
from .config import RunConfig
from .optim import lars_step, lr_schedule, scaled_base_lr
from .pipeline import batch_indices, encoder_config, sample_views, steps_per_epoch, view_rng
from .scenes import Dataset


def global_views(dataset: Dataset, cfg: RunConfig, step: int) -> np.ndarray:
    """(2B, R, R, 3): first views of the batch, then second views."""
    idx = batch_indices(cfg.seed, len(dataset), cfg.batch_size, step)
    first, second = [], []
    for i in idx:
        _, (x1, x2) = sample_views(dataset.images[i], cfg.variant, cfg.resolution, view_rng(cfg.seed, step, int(i)))
        first.append(x1)
        second.append(x2)
    return np.stack(first + second)


def global_loss_and_grads(params: dict, images: np.ndarray, cfg: RunConfig) -> tuple[float, dict]:
    g = tc.Graph(np.dtype(cfg.dtype))
    nodes = bind(g, params)
    h = encoder_graph(nodes, g.constant(images), encoder_config(cfg.encoder))
    z = tc.l2_rescale(mlp_graph(nodes, "proj", tc.spatial_mean(h)), cfg.tau)
    n2 = images.shape[0]
    half = n2 // 2
    sim = tc.matmul(z, z, transpose_b=True)
    partner = (np.arange(n2) + half) % n2
    admissible = ~np.eye(n2, dtype=bool)
    loss = tc.softmax_xent(sim, partner, admissible=admissible, weights=np.full(n2, 1.0 / n2))
    value, grads = float(loss.value), tc.backward(g, loss)
    g.clear()
    return value, grads


def reference_train(cfg: RunConfig, dataset: Dataset, state: TrainState, steps: int) -> list[float]:
    """Run ``steps`` steps in place on ``state``; returns the per-step losses."""
    total = steps_per_epoch(len(dataset), cfg.batch_size) * cfg.epochs
    base = scaled_base_lr(cfg.base_lr, cfg.batch_size)
    losses = []
    for _ in range(steps):
        loss, grads = global_loss_and_grads(state.params, global_views(dataset, cfg, state.step), cfg)
        lars_step(state.params, state.momentum, grads, lr_schedule(cfg.schedule, base, state.step, total),
                  cfg.weight_decay)
        state.step += 1
        losses.append(loss)
    return losses
