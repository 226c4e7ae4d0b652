"""Pretraining loop: views -> masks -> latents -> contrastive detection loss -> LARS (+ EMA)."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .. import tensorcore as tc
from ..dtns import atomic_write_bytes
from ..loss import detcon_loss_graph, pair_table
from ..model import TrainState, bind, ema_schedule, ema_update, init_params, latents_graph
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .optim import lars_step, lr_schedule, scaled_base_lr
from .pipeline import Batch, encoder_config, make_batch, mask_sets, mask_source_label, mean_abo, steps_per_epoch
from .scenes import Dataset, load_dataset

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "epoch", "loss", "pos_prob", "positives", "negatives", "lambda", "lr")


class Divergence(RuntimeError):
    """Loss or gradients became non-finite; the last good checkpoint is kept."""


@dataclass
class StepResult:
    loss: float
    grads: dict
    pos_prob: float
    positives: int
    negatives: float


def _split(lat: tc.Node, n: int) -> tuple[tc.Node, tc.Node]:
    return tc.gather_rows(lat, np.arange(n)), tc.gather_rows(lat, np.arange(n, 2 * n))


def loss_and_grads(state: TrainState, batch: Batch, cfg: RunConfig, debug: bool = False) -> StepResult:
    """Forward + backward for one batch; gradients w.r.t. the online parameters only."""
    enc = encoder_config(cfg.encoder)
    lcfg = cfg.loss_config()
    dtype = np.dtype(cfg.dtype)
    b, k = batch.region_ids.shape
    n = b * k
    g = tc.Graph(dtype)
    valid = batch.valid.reshape(2 * b, k)
    if state.variant == "s":
        nodes = bind(g, state.params)
        lat, valid = latents_graph(nodes, batch.images, batch.soft_masks, valid, enc, "shared", cfg.tau)
        z1, z2 = _split(lat, n)
        meta1, meta2 = (batch.region_ids, valid[:b]), (batch.region_ids, valid[b:])
        loss, terms = detcon_loss_graph(z1, z2, meta1, meta2, batch.pairing, lcfg)
    else:
        online = bind(g, state.params)
        target = bind(g, state.shadow, trainable=False)
        on, valid_on = latents_graph(online, batch.images, batch.soft_masks, valid, enc, "online", cfg.tau)
        tg, valid_tg = latents_graph(target, batch.images, batch.soft_masks, valid, enc, "target", cfg.tau)
        valid = valid_on & valid_tg
        (o1, o2), (t1, t2) = _split(on, n), _split(tg, n)
        meta1, meta2 = (batch.region_ids, valid[:b]), (batch.region_ids, valid[b:])
        one_way = replace(lcfg, symmetrize=False)
        if lcfg.prediction_mode == "within-view":
            loss, terms = detcon_loss_graph(o1, o2, meta1, meta2, batch.pairing, lcfg)
        else:
            loss, terms = detcon_loss_graph(o1, t2, meta1, meta2, batch.pairing, one_way)
            if lcfg.symmetrize:
                back, more = detcon_loss_graph(o2, t1, meta2, meta1, batch.pairing.transpose(0, 2, 1), one_way)
                loss = tc.scale(tc.ew_add(loss, back), 0.5)
                terms = terms + more
    value = float(loss.value)
    if not math.isfinite(value):
        raise Divergence(f"non-finite loss {value}")
    grads = tc.backward(g, loss)
    if debug and state.shadow is not None:
        leaked = [name for name in grads if name not in state.params]
        assert not leaked, f"gradient reached target parameters: {leaked}"
    table = pair_table(terms)
    g.clear()
    return StepResult(
        loss=value,
        grads=grads,
        pos_prob=float(table["pos_prob"].mean()),
        positives=int(len(table)),
        negatives=float(table["negatives"].mean()),
    )


def train_step(state: TrainState, batch: Batch, cfg: RunConfig, total: int, debug: bool = False) -> dict:
    """One optimisation step in place; returns the metrics row."""
    try:
        res = loss_and_grads(state, batch, cfg, debug)
    except tc.NonFiniteError as exc:
        raise Divergence(str(exc)) from exc
    lr = lr_schedule(cfg.schedule, scaled_base_lr(cfg.base_lr, cfg.batch_size), state.step, total)
    try:
        lars_step(state.params, state.momentum, res.grads, lr, cfg.weight_decay)
    except FloatingPointError as exc:
        raise Divergence(str(exc)) from exc
    state.step += 1
    lam = float("nan")
    if state.variant == "b":
        shadow_before = {k: v.copy() for k, v in state.shadow.items()} if debug else None
        lam = ema_schedule(state.step, total, state.ema_base)
        ema_update(state, lam)
        if debug:
            for k_, v in state.shadow.items():
                want = lam * shadow_before[k_] + (1 - lam) * state.params[k_]
                assert np.allclose(v, want.astype(v.dtype)), f"target parameter {k_} moved off its EMA"
    return {
        "step": state.step,
        "loss": res.loss,
        "pos_prob": res.pos_prob,
        "positives": res.positives,
        "negatives": res.negatives,
        "lambda": lam,
        "lr": lr,
    }


def format_metrics_row(row: dict) -> str:
    out = []
    for c in METRIC_COLUMNS:
        v = row[c]
        out.append(repr(float(v)) if isinstance(v, float) else str(v))
    return "\t".join(out) + "\n"


def read_metrics(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        return []
    header = lines[0].split("\t")
    return [dict(zip(header, line.split("\t"))) for line in lines[1:] if line]


def initial_state(cfg: RunConfig, total: int) -> TrainState:
    enc = encoder_config(cfg.encoder)
    params = init_params(enc, cfg.variant, np.random.default_rng([cfg.seed, 0x1417]), dtype=np.dtype(cfg.dtype))
    return TrainState(params, cfg.variant, total_steps=total, ema_base=cfg.ema_base)


@dataclass
class RunResult:
    out: Path
    state: TrainState
    metrics: list[dict]
    abo: float | None
    completed: bool


def pretrain(
    cfg: RunConfig,
    dataset: Dataset | None = None,
    threads: int = 1,
    stop_after: int | None = None,
    resume: bool = True,
    debug: bool = False,
) -> RunResult:
    """Run (or resume) pretraining into ``cfg.out``.

    Writes ``run.cfg``, append-only ``metrics.tsv``, ``checkpoint/`` (every
    epoch, at start and at ``stop_after``) and ``summary.tsv`` on completion.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if dataset is None:
        dataset = load_dataset(cfg.dataset)
    enc = encoder_config(cfg.encoder)
    enc.grid(cfg.resolution)
    per_epoch = steps_per_epoch(len(dataset), cfg.batch_size)
    total = per_epoch * cfg.epochs
    masks = mask_sets(dataset, cfg, cfg.mask_cache or None)
    abo_value = mean_abo(dataset, masks)
    ckpt = out / "checkpoint"
    metrics_path = out / "metrics.tsv"

    if resume and (ckpt / "state.txt").exists():
        state, _ = load_checkpoint(ckpt)
        if state.total_steps != total or state.variant != cfg.variant:
            raise ValueError(f"checkpoint in {ckpt} belongs to a different run configuration")
        kept = [r for r in read_metrics(metrics_path) if int(r["step"]) <= state.step] if metrics_path.exists() else []
        _rewrite_metrics(metrics_path, kept)
        log.info("resuming %s at step %d", out, state.step)
    else:
        state = initial_state(cfg, total)
        atomic_write_bytes(out / "run.cfg", cfg.to_text().encode())
        _rewrite_metrics(metrics_path, [])
        save_checkpoint(ckpt, state, _ckpt_extra(cfg))

    executor = ThreadPoolExecutor(threads) if threads > 1 else None
    rows = []
    try:
        with threadpool_limits(limits=threads), open(metrics_path, "a") as mf:
            while state.step < total:
                if stop_after is not None and state.step >= stop_after:
                    save_checkpoint(ckpt, state, _ckpt_extra(cfg))
                    return RunResult(out, state, read_metrics(metrics_path), abo_value, False)
                batch = make_batch(dataset, masks, cfg, enc, state.step, executor)
                epoch = state.step // per_epoch
                try:
                    row = train_step(state, batch, cfg, total, debug)
                except (Divergence, tc.NonFiniteError) as exc:
                    raise Divergence(f"diverged at step {state.step + 1}: {exc}; last good checkpoint in {ckpt}") from exc
                row["epoch"] = epoch
                mf.write(format_metrics_row(row))
                mf.flush()
                rows.append(row)
                if state.step % per_epoch == 0:
                    save_checkpoint(ckpt, state, _ckpt_extra(cfg))
    finally:
        if executor is not None:
            executor.shutdown()
    metrics = read_metrics(metrics_path)
    _write_summary(out, cfg, state, metrics, abo_value)
    return RunResult(out, state, metrics, abo_value, True)


def _ckpt_extra(cfg: RunConfig) -> dict:
    return {"seed": cfg.seed, "encoder": cfg.encoder, "tau": repr(cfg.tau), "fingerprint": cfg.fingerprint()}


def _rewrite_metrics(path: Path, rows: list[dict]) -> None:
    text = "\t".join(METRIC_COLUMNS) + "\n" + "".join("\t".join(r[c] for c in METRIC_COLUMNS) + "\n" for r in rows)
    atomic_write_bytes(path, text.encode())


SUMMARY_COLUMNS = ("run_id", "fingerprint", "variant", "mask_source", "latents", "steps", "final_loss", "abo")


def _write_summary(out: Path, cfg: RunConfig, state: TrainState, metrics: list[dict], abo_value) -> None:
    vals = [
        out.resolve().name, cfg.fingerprint(), cfg.variant, mask_source_label(cfg), str(cfg.latents),
        str(state.step), metrics[-1]["loss"] if metrics else "nan",
        "nan" if abo_value is None else repr(abo_value),
    ]
    text = "\t".join(SUMMARY_COLUMNS) + "\n" + "\t".join(vals) + "\n"
    atomic_write_bytes(out / "summary.tsv", text.encode())
