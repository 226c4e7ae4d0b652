"""Mask quality on synthetic scenes: ABO of spatial grids and FH segmentations.

ABO is averaged over ground-truth objects (background excluded). Grids improve
until their cells match the object scale; FH masks beat every grid.

    python3 demos/mask_quality.py [n_images]
"""
import sys

import numpy as np

from detcon.segmentation import abo, fh_segment, grid_labelmap, labelmap_to_maskset, object_masks
from detcon.train.scenes import SceneSpec, render_scene

n = int(sys.argv[1]) if len(sys.argv) > 1 else 100
spec = SceneSpec(n_images=n, size=64, seed=11)
scenes = [render_scene(spec, i) for i in range(n)]
scenes = [(img, object_masks(lab)) for img, lab, _ in scenes if lab.any()]

print("masks\tabo")
for g in (1, 2, 3, 4, 5, 6):
    grid = labelmap_to_maskset(grid_labelmap(64, 64, g))
    print(f"grid {g}x{g}\t{np.mean([abo(gt, grid) for _, gt in scenes]):.3f}")
for s, c in ((10, 20), (50, 20), (100, 20), (500, 50)):
    score = np.mean([abo(gt, labelmap_to_maskset(fh_segment(img, s, c))) for img, gt in scenes])
    print(f"fh s={s} c={c}\t{score:.3f}")
