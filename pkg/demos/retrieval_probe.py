"""How much shape-class information do mask-pooled encoder features carry?

Compares leave-one-out 1-NN retrieval with a supervised linear probe (70/30
split, L2-regularised softmax regression) for a random-init encoder and for
any checkpoints given on the command line; also probes the 8x8 ground-truth
silhouette itself as a reference point.

    python3 demos/retrieval_probe.py SCENES_DIR [RUN_DIR ...]
"""
import sys

import numpy as np
from scipy.optimize import minimize

from detcon.segmentation import downsample_mask
from detcon.train.checkpoint import load_checkpoint
from detcon.train.config import RunConfig
from detcon.train.evaluation import object_features, retrieval_accuracy
from detcon.train.pipeline import encoder_config
from detcon.train.pretrain import initial_state
from detcon.train.scenes import load_dataset


def linear_probe(features, classes, l2=1e-3):
    names = sorted(set(classes))
    y = np.array([names.index(c) for c in classes])
    f = (features - features.mean(0)) / (features.std(0) + 1e-8)
    order = np.random.default_rng(0).permutation(len(y))
    train, test = order[: len(y) * 7 // 10], order[len(y) * 7 // 10:]
    d, k = f.shape[1], len(names)

    def objective(w):
        w = w.reshape(d + 1, k)
        z = f[train] @ w[:-1] + w[-1]
        z -= z.max(1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(1, keepdims=True)
        g = p.copy()
        g[np.arange(len(train)), y[train]] -= 1
        grad = np.vstack([f[train].T @ g / len(train) + 2 * l2 * w[:-1], g.sum(0) / len(train)])
        loss = -np.log(p[np.arange(len(train)), y[train]] + 1e-12).mean() + l2 * (w[:-1] ** 2).sum()
        return loss, grad.ravel()

    w = minimize(objective, np.zeros((d + 1) * k), jac=True, method="L-BFGS-B").x.reshape(d + 1, k)
    return float(((f[test] @ w[:-1] + w[-1]).argmax(1) == y[test]).mean())


ds = load_dataset(sys.argv[1])
enc = encoder_config("desk")
runs = [("random-init", initial_state(RunConfig(), 1).params)]
runs += [(r, load_checkpoint(f"{r}/checkpoint")[0].params) for r in sys.argv[2:]]
print("encoder\tnn_retrieval\tlinear_probe\tmajority")
for name, params in runs:
    f, c = object_features(params, enc, ds)
    majority = max(np.mean(c == k) for k in set(c))
    print(f"{name}\t{retrieval_accuracy(f, c)['accuracy']:.3f}\t{linear_probe(f, c):.3f}\t{majority:.3f}")
sil, names = [], []
for labels, classes in zip(ds.labels, ds.classes):
    for obj in range(1, int(labels.max()) + 1):
        w = downsample_mask(labels == obj, 8, 8)
        if w.sum() > 0:
            sil.append(w.ravel())
            names.append(classes[obj])
print(f"8x8 silhouette\t-\t{linear_probe(np.array(sil), np.array(names)):.3f}\t-")
