"""Checkpoint directories: ``manifest.tsv`` + one DTNS file per tensor + ``state.txt``."""
from __future__ import annotations

import os
import shutil
import tempfile
from pathlib import Path

import numpy as np

from .. import dtns
from ..model import TrainState

FORMAT_VERSION = 1
GROUPS = ("params", "shadow", "momentum")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: TrainState, extra: dict | None = None) -> Path:
    """Write atomically: build in a sibling temp directory, then swap it in."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    manifest = []
    for group in GROUPS:
        tensors = getattr(state, group) or {}
        for name in sorted(tensors):
            rel = f"{group}/{name}.dtns"
            (tmp / group).mkdir(exist_ok=True)
            arr = np.asarray(tensors[name])
            dtns.save(tmp / rel, arr)
            manifest.append(f"{group}/{name}\t{rel}\t{','.join(map(str, arr.shape))}\n")
    (tmp / "manifest.tsv").write_text("".join(manifest))
    info = {
        "format_version": FORMAT_VERSION,
        "step": state.step,
        "variant": state.variant,
        "ema_base": repr(float(state.ema_base)),
        "total_steps": state.total_steps,
        **(extra or {}),
    }
    (tmp / "state.txt").write_text("".join(f"{k}={v}\n" for k, v in info.items()))
    old = None
    if path.exists():
        old = path.with_name(f".{path.name}.old")
        if old.exists():
            shutil.rmtree(old)
        os.replace(path, old)
    os.replace(tmp, path)
    if old is not None:
        shutil.rmtree(old)
    return path


def read_state(path) -> dict:
    path = Path(path)
    try:
        lines = (path / "state.txt").read_text().splitlines()
    except OSError as exc:
        raise CheckpointError(f"{path}: missing state.txt") from exc
    return dict(line.split("=", 1) for line in lines if "=" in line)


def load_checkpoint(path) -> tuple[TrainState, dict]:
    path = Path(path)
    info = read_state(path)
    if int(info.get("format_version", -1)) != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {info.get('format_version')}")
    groups = {g: {} for g in GROUPS}
    try:
        rows = (path / "manifest.tsv").read_text().splitlines()
    except OSError as exc:
        raise CheckpointError(f"{path}: missing manifest.tsv") from exc
    for row in rows:
        parts = row.split("\t")
        if len(parts) != 3:
            raise CheckpointError(f"{path}: malformed manifest row {row!r}")
        key, rel, shape = parts
        group, name = key.split("/", 1)
        if group not in groups:
            raise CheckpointError(f"{path}: unknown tensor group in {key!r}")
        try:
            arr = dtns.load(path / rel)
        except (OSError, dtns.DTNSError) as exc:
            raise CheckpointError(f"{path}: cannot load tensor {key}: {exc}") from exc
        want = tuple(int(s) for s in shape.split(",") if s)
        if arr.shape != want:
            raise CheckpointError(f"{path}: tensor {key} has shape {arr.shape}, manifest says {want}")
        groups[group][name] = arr
    state = TrainState(
        params=groups["params"],
        variant=info["variant"],
        total_steps=int(info["total_steps"]),
        ema_base=float(info["ema_base"]),
        shadow=groups["shadow"] or None,
        momentum=groups["momentum"],
        step=int(info["step"]),
    )
    return state, info
