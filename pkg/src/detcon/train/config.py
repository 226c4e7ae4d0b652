"""Run configuration: a flat ``key = value`` text file."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

from ..loss import MODES, SCOPES, SOURCES, LossConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Every key of a run file; defaults are the desk-scale settings."""

    dataset: str = ""
    out: str = "run"
    variant: str = "s"  # s | b
    mask_source: str = "fh"  # grid | fh | human
    grid_n: int = 1
    fh_scale: float = 500.0
    fh_min_size: int = 50
    fh_sigma: float = 0.8
    latents: int = 16
    batch_size: int = 32
    epochs: int = 10
    base_lr: float = 0.3
    weight_decay: float = 1e-6
    schedule: str = "cosine"  # cosine | piecewise
    ema_base: float = 0.99
    tau: float = 0.1
    seed: int = 0
    resolution: int = 64
    encoder: str = "desk"  # desk | default
    negative_scope: str = "all-batch"
    workers: int = 1
    negative_source: str = "anchor-view"
    prediction_mode: str = "cross-view"
    symmetrize: bool = True
    dtype: str = "float32"  # float32 | float64
    mask_cache: str = ""  # directory of a mask store; empty: compute in memory

    def validate(self, check_files: bool = True) -> "RunConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.variant in ("s", "b"), f"variant must be s or b, got {self.variant!r}")
        need(self.mask_source in ("grid", "fh", "human"), f"unknown mask_source {self.mask_source!r}")
        need(self.grid_n >= 1, "grid_n must be >= 1")
        need(self.fh_scale > 0 and self.fh_min_size >= 1 and self.fh_sigma >= 0, "invalid FH parameters")
        need(self.latents >= 1, "latents must be >= 1")
        need(self.batch_size >= 1 and self.epochs >= 1, "batch_size and epochs must be >= 1")
        need(self.base_lr > 0 and self.weight_decay >= 0, "invalid learning rate or weight decay")
        need(self.schedule in ("cosine", "piecewise"), f"unknown schedule {self.schedule!r}")
        need(0.0 <= self.ema_base <= 1.0, "ema_base must lie in [0, 1]")
        need(self.tau > 0, "tau must be positive")
        need(self.resolution >= 8, "resolution too small")
        need(self.encoder in ("desk", "default"), f"unknown encoder {self.encoder!r}")
        need(self.negative_scope in SCOPES, f"negative_scope must be one of {SCOPES}")
        need(self.negative_source in SOURCES, f"negative_source must be one of {SOURCES}")
        need(self.prediction_mode in MODES, f"prediction_mode must be one of {MODES}")
        need(self.workers >= 1 and self.batch_size % self.workers == 0,
             "batch_size must be divisible by workers")
        need(self.dtype in ("float32", "float64"), "dtype must be float32 or float64")
        if check_files:
            need(bool(self.dataset), "dataset is required")
            need(Path(self.dataset).is_dir(), f"dataset directory {self.dataset} does not exist")
            if self.mask_source == "human":
                need((Path(self.dataset) / "labels").is_dir(), "human masks need a labels/ directory")
        return self

    def loss_config(self) -> LossConfig:
        return LossConfig(
            negative_scope=self.negative_scope,
            workers=self.workers,
            negative_source=self.negative_source,
            prediction_mode=self.prediction_mode,
            symmetrize=self.symmetrize,
            tau=self.tau,
        )

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def fingerprint(self) -> str:
        """Hash of every setting except the output location."""
        text = self.with_(out="").to_text()
        return hashlib.sha256(text.encode()).hexdigest()[:12]


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _convert(name: str, kind, raw: str):
    try:
        if kind is bool or kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is int or kind == "int":
            return int(raw)
        if kind is float or kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    known = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _convert(key, known[key], raw)
    return RunConfig(**values)


def load_config(path, check_files: bool = True) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = parse_config(text, str(path))
    if cfg.dataset and not Path(cfg.dataset).is_absolute():
        cfg = cfg.with_(dataset=str((path.parent / cfg.dataset).resolve()))
    return cfg.validate(check_files)
