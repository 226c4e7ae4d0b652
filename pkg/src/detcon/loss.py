"""Contrastive detection objective over mask-pooled latents.

Each positive pair (anchor slot m in one view, slot m' in the other view
that pools the same region of the same image) contributes

    -log( exp(v_m . v'_m') / (exp(v_m . v'_m') + sum_n exp(v_m . v_n)) )

and the total is the mean over positive pairs.  Which latents count as
negatives ``v_n`` is controlled by :class:`LossConfig`.

Two implementations are provided: :func:`detcon_loss_graph` builds the loss
on a :class:`~detcon.tensorcore.Graph` (so it can be differentiated), and
:func:`loss_oracle` evaluates the same quantity with explicit Python loops.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .tensorcore import Graph, Node

SCOPES = ("all-batch", "per-worker", "per-image")
SOURCES = ("anchor-view", "target-view", "both")
MODES = ("cross-view", "within-view")


@dataclass(frozen=True)
class LossConfig:
    negative_scope: str = "all-batch"
    workers: int = 1
    negative_source: str = "anchor-view"
    prediction_mode: str = "cross-view"
    symmetrize: bool = True
    tau: float = 0.1

    def __post_init__(self):
        if self.negative_scope not in SCOPES:
            raise ValueError(f"negative_scope must be one of {SCOPES}")
        if self.negative_source not in SOURCES:
            raise ValueError(f"negative_source must be one of {SOURCES}")
        if self.prediction_mode not in MODES:
            raise ValueError(f"prediction_mode must be one of {MODES}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


@dataclass
class LatentBatch:
    """``latents`` (B, k, d), ``region_ids`` (B, k), ``valid`` (B, k)."""

    latents: np.ndarray
    region_ids: np.ndarray
    valid: np.ndarray
    view: str = ""

    def __post_init__(self):
        self.latents = np.asarray(self.latents, dtype=np.float64)
        self.region_ids = np.asarray(self.region_ids)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.latents.ndim != 3 or self.region_ids.shape != self.latents.shape[:2]:
            raise ValueError("latents must be (B, k, d) with (B, k) region ids")
        if self.valid.shape != self.region_ids.shape:
            raise ValueError("valid must be (B, k)")

    @property
    def shape(self):
        return self.latents.shape


class NoPositivePairs(ValueError):
    pass


def check_norms(latents: np.ndarray, valid: np.ndarray, tau: float, rtol: float = 1e-6):
    """Raise if any valid latent does not have norm 1/sqrt(tau)."""
    norms = np.linalg.norm(np.asarray(latents, dtype=np.float64), axis=-1)[np.asarray(valid, bool)]
    want = 1.0 / math.sqrt(tau)
    if norms.size and np.max(np.abs(norms - want)) > rtol * want:
        raise ValueError(f"latents are not rescaled to norm {want:.6g} (found {norms.min():.6g}..{norms.max():.6g})")


# -- pair structure -----------------------------------------------------------

def _scope_of(cfg: LossConfig, batch: int) -> np.ndarray:
    """Group label per image; negatives are drawn from the anchor's group."""
    if cfg.negative_scope == "all-batch":
        return np.zeros(batch, dtype=int)
    if cfg.negative_scope == "per-image":
        return np.arange(batch)
    if batch % cfg.workers:
        raise ValueError(f"batch {batch} not divisible by {cfg.workers} workers")
    return np.arange(batch) // (batch // cfg.workers)


def within_view_pairing(ids: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """(B, k, k) indicator of same-region slot pairs in one view, self-pairs excluded."""
    ids, valid = np.asarray(ids), np.asarray(valid, bool)
    p = (ids[:, :, None] == ids[:, None, :]) & valid[:, :, None] & valid[:, None, :]
    k = ids.shape[1]
    p[:, np.arange(k), np.arange(k)] = False
    return p


@dataclass
class PairStructure:
    """Index bookkeeping for one directional loss term.

    Logit row r is ``concat(A @ T^T, A @ A^T)[anchor[r]]`` where A holds the
    anchor-view latents and T the target-view latents (both flattened to
    (B*k, d)); ``target[r]`` is the positive's column and ``admissible[r]``
    marks the positive plus every admitted negative.
    """

    anchor: np.ndarray
    target: np.ndarray
    admissible: np.ndarray
    image: np.ndarray
    anchor_slot: np.ndarray
    target_slot: np.ndarray


def pair_structure(ids_a, valid_a, ids_t, valid_t, pairing, cfg: LossConfig) -> PairStructure:
    ids_a, ids_t = np.asarray(ids_a), np.asarray(ids_t)
    valid_a, valid_t = np.asarray(valid_a, bool), np.asarray(valid_t, bool)
    pairing = np.asarray(pairing, bool)
    batch, k = ids_a.shape
    if pairing.shape != (batch, k, k):
        raise ValueError(f"pairing must be ({batch}, {k}, {k}), got {pairing.shape}")
    n = batch * k
    pairing = pairing & valid_a[:, :, None] & valid_t[:, None, :]
    img, m, mp = np.nonzero(pairing)
    if img.size == 0:
        raise NoPositivePairs("no positive pairs in the batch")
    anchor = img * k + m
    target = img * k + mp

    group = np.repeat(_scope_of(cfg, batch), k)
    image_of = np.repeat(np.arange(batch), k)
    fa, ft = ids_a.reshape(-1), ids_t.reshape(-1)
    va, vt = valid_a.reshape(-1), valid_t.reshape(-1)
    same_group = group[anchor][:, None] == group[None, :]
    same_image = image_of[anchor][:, None] == image_of[None, :]
    anchor_id = fa[anchor][:, None]

    adm_t = np.zeros((anchor.size, n), bool)
    adm_a = np.zeros((anchor.size, n), bool)
    if cfg.negative_source in ("target-view", "both"):
        adm_t = same_group & vt[None, :] & ~(same_image & (ft[None, :] == anchor_id))
    if cfg.negative_source in ("anchor-view", "both"):
        adm_a = same_group & va[None, :] & ~(same_image & (fa[None, :] == anchor_id))
        adm_a[np.arange(anchor.size), anchor] = False
    adm_t[np.arange(anchor.size), target] = True
    return PairStructure(anchor, target, np.concatenate([adm_t, adm_a], axis=1), img, m, mp)


# -- graph implementation -----------------------------------------------------

def _directional_graph(a: Node, t: Node, ps: PairStructure) -> tuple[Node, Node]:
    logits = tc.concat([tc.matmul(a, t, transpose_b=True), tc.matmul(a, a, transpose_b=True)], axis=1)
    rows = tc.gather_rows(logits, ps.anchor)
    weights = np.full(ps.anchor.size, 1.0 / ps.anchor.size)
    return tc.softmax_xent(rows, ps.target, admissible=ps.admissible, weights=weights), rows


def detcon_loss_graph(
    a: Node,
    b: Node,
    a_meta: tuple[np.ndarray, np.ndarray],
    b_meta: tuple[np.ndarray, np.ndarray],
    pairing: np.ndarray,
    cfg: LossConfig,
) -> tuple[Node, list[tuple[PairStructure, Node]]]:
    """Scalar loss node for flattened latents ``a``, ``b`` of shape (B*k, d).

    ``a_meta``/``b_meta`` are (region_ids, valid) arrays of shape (B, k).
    Returns the loss and, per directional term, its pair structure and
    logit-row node (for diagnostics).
    """
    (ids_a, va), (ids_b, vb) = a_meta, b_meta
    terms = []
    if cfg.prediction_mode == "within-view":
        directions = [(a, a, ids_a, va, ids_a, va, within_view_pairing(ids_a, va))]
        if cfg.symmetrize:
            directions.append((b, b, ids_b, vb, ids_b, vb, within_view_pairing(ids_b, vb)))
    else:
        pairing = np.asarray(pairing, bool)
        directions = [(a, b, ids_a, va, ids_b, vb, pairing)]
        if cfg.symmetrize:
            directions.append((b, a, ids_b, vb, ids_a, va, pairing.transpose(0, 2, 1)))
    for anchor, tgt, i_a, v_a, i_t, v_t, pr in directions:
        ps = pair_structure(i_a, v_a, i_t, v_t, pr, cfg)
        loss, rows = _directional_graph(anchor, tgt, ps)
        terms.append((ps, loss, rows))
    total = terms[0][1]
    if len(terms) == 2:
        total = tc.scale(tc.ew_add(terms[0][1], terms[1][1]), 0.5)
    return total, [(ps, rows) for ps, _, rows in terms]


def per_pair_losses(rows: np.ndarray, ps: PairStructure) -> np.ndarray:
    z = np.where(ps.admissible, rows, -np.inf)
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    return lse - rows[np.arange(rows.shape[0]), ps.target]


def detcon_loss(a: LatentBatch, b: LatentBatch, pairing: np.ndarray, cfg: LossConfig):
    """(loss, per-pair table) in 64-bit.

    The table is a structured array with one row per positive pair and
    direction: direction (0 = a anchors, 1 = b anchors), image, anchor slot,
    target slot, loss, positive probability and number of admitted negatives.
    """
    if a.shape != b.shape:
        raise ValueError(f"view shapes differ: {a.shape} vs {b.shape}")
    check_norms(a.latents, a.valid, cfg.tau)
    check_norms(b.latents, b.valid, cfg.tau)
    batch, k, d = a.shape
    g = Graph(np.float64)
    na = g.constant(a.latents.reshape(batch * k, d))
    nb = g.constant(b.latents.reshape(batch * k, d))
    loss, terms = detcon_loss_graph(na, nb, (a.region_ids, a.valid), (b.region_ids, b.valid), pairing, cfg)
    return float(loss.value), pair_table(terms)


PAIR_DTYPE = [
    ("direction", "i4"), ("image", "i4"), ("anchor_slot", "i4"), ("target_slot", "i4"),
    ("loss", "f8"), ("pos_prob", "f8"), ("negatives", "i4"),
]


def pair_table(terms) -> np.ndarray:
    rows = []
    for direction, (ps, node) in enumerate(terms):
        vals = node.value
        losses = per_pair_losses(vals, ps)
        prob, negs = masked_softmax_stats(vals, ps.admissible, ps.target)
        for r in range(ps.anchor.size):
            rows.append((direction, ps.image[r], ps.anchor_slot[r], ps.target_slot[r], losses[r], prob[r], negs[r]))
    return np.array(rows, dtype=PAIR_DTYPE)


def masked_softmax_stats(logits, admissible, positive) -> tuple[np.ndarray, np.ndarray]:
    """Per row: softmax probability of the ``positive`` column among admitted
    columns, and the number of admitted columns other than the positive."""
    logits = np.asarray(logits, dtype=np.float64)
    admissible = np.asarray(admissible, bool).copy()
    positive = np.asarray(positive)
    rows = np.arange(logits.shape[0])
    admissible[rows, positive] = True
    z = np.where(admissible, logits, -np.inf)
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    prob = e[rows, positive] / e.sum(axis=1)
    return prob, admissible.sum(axis=1) - 1


# -- brute-force oracle -------------------------------------------------------

ORACLE_LIMIT = 64


def loss_oracle(a: LatentBatch, b: LatentBatch, pairing: np.ndarray, cfg: LossConfig) -> float:
    """Same objective as :func:`detcon_loss`, written as explicit loops.

    Only for small instances (B*k <= 64).
    """
    batch, k, _ = a.shape
    if batch * k > ORACLE_LIMIT:
        raise ValueError(f"oracle limited to B*k <= {ORACLE_LIMIT}, got {batch * k}")
    if cfg.prediction_mode == "within-view":
        dirs = [(a, a, _within(a))]
        if cfg.symmetrize:
            dirs.append((b, b, _within(b)))
    else:
        p = np.asarray(pairing, bool)
        dirs = [(a, b, p)]
        if cfg.symmetrize:
            dirs.append((b, a, p.transpose(0, 2, 1)))
    terms = [_oracle_direction(x, y, p, cfg) for x, y, p in dirs]
    return sum(terms) / len(terms)


def _within(v: LatentBatch):
    k = v.shape[1]
    out = np.zeros((v.shape[0], k, k), bool)
    for i in range(v.shape[0]):
        for m in range(k):
            for n in range(k):
                out[i, m, n] = m != n and v.valid[i, m] and v.valid[i, n] and v.region_ids[i, m] == v.region_ids[i, n]
    return out


def _same_scope(cfg, batch, i, j):
    if cfg.negative_scope == "all-batch":
        return True
    if cfg.negative_scope == "per-image":
        return i == j
    shard = batch // cfg.workers
    return i // shard == j // shard


def _oracle_direction(anc: LatentBatch, tgt: LatentBatch, pairing, cfg) -> float:
    batch, k, _ = anc.shape
    total, count = 0.0, 0
    for i in range(batch):
        for m in range(k):
            for mp in range(k):
                if not (pairing[i, m, mp] and anc.valid[i, m] and tgt.valid[i, mp]):
                    continue
                v = anc.latents[i, m]
                pos = float(np.dot(v, tgt.latents[i, mp]))
                negs = []
                for j in range(batch):
                    if not _same_scope(cfg, batch, i, j):
                        continue
                    for n in range(k):
                        if cfg.negative_source in ("anchor-view", "both"):
                            own = j == i and n == m
                            dup = j == i and anc.region_ids[j, n] == anc.region_ids[i, m]
                            if anc.valid[j, n] and not own and not dup:
                                negs.append(float(np.dot(v, anc.latents[j, n])))
                        if cfg.negative_source in ("target-view", "both"):
                            dup = j == i and tgt.region_ids[j, n] == anc.region_ids[i, m]
                            if tgt.valid[j, n] and not dup:
                                negs.append(float(np.dot(v, tgt.latents[j, n])))
                top = max([pos] + negs)
                denom = math.exp(pos - top) + sum(math.exp(s - top) for s in negs)
                total += -(pos - top - math.log(denom))
                count += 1
    if count == 0:
        raise NoPositivePairs("no positive pairs in the batch")
    return total / count
