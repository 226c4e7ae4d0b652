"""Contrastive detection pretraining over unsupervised object masks, on a
small numpy autodiff core.

Modules: ``tensorcore`` (reverse-mode autodiff), ``segmentation`` (grid and
graph-based masks, ABO), ``augment`` (paired view augmentation), ``model``
(encoder, heads, EMA target, cost model), ``loss`` (the mask-level
contrastive objective), ``train`` (optimizer, schedules, pretraining,
evaluation) and ``cli``.
"""

__version__ = "0.1.0"
