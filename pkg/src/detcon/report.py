"""Merge run directories into plot-ready TSV tables (no rendering)."""
from __future__ import annotations

from collections import Counter
from pathlib import Path

from .train.pretrain import METRIC_COLUMNS, SUMMARY_COLUMNS, read_metrics

REPORT_COLUMNS = SUMMARY_COLUMNS + ("accuracy",)
CURVE_COLUMNS = ("run_id", "fingerprint", "step", "loss", "pos_prob")


class ReportError(ValueError):
    pass


def _read_table(path: Path) -> tuple[list[str], list[list[str]]]:
    try:
        lines = [line for line in path.read_text().splitlines() if line]
    except OSError as exc:
        raise ReportError(f"cannot read {path}: {exc}") from None
    if not lines:
        raise ReportError(f"{path} is empty")
    return lines[0].split("\t"), [line.split("\t") for line in lines[1:]]


def read_summary(run: Path) -> dict:
    path = run / "summary.tsv"
    if not path.exists():
        raise ReportError(f"{run}: no summary.tsv (run incomplete?)")
    header, rows = _read_table(path)
    if tuple(header) != SUMMARY_COLUMNS or len(rows) != 1 or len(rows[0]) != len(header):
        raise ReportError(f"{path}: inconsistent columns {header}")
    return dict(zip(header, rows[0]))


def read_accuracy(run: Path) -> str:
    path = run / "eval.tsv"
    if not path.exists():
        return "nan"
    for line in path.read_text().splitlines():
        key, _, value = line.partition("\t")
        if key == "accuracy":
            return value
    raise ReportError(f"{path}: no accuracy line")


def _check_unique(ids: list[str]) -> None:
    dup = sorted(k for k, n in Counter(ids).items() if n > 1)
    if dup:
        raise ReportError(f"duplicate run ids: {', '.join(dup)}")


def build_report(runs: list[Path], curves: bool = False) -> str:
    """One row per run (sorted by ABO, then run id), or per-step loss curves."""
    if not runs:
        raise ReportError("no runs given")
    summaries = [read_summary(Path(r)) for r in runs]
    _check_unique([s["run_id"] for s in summaries])
    if curves:
        rows = []
        for run, s in zip(runs, summaries):
            path = Path(run) / "metrics.tsv"
            header, _ = _read_table(path)
            if tuple(header) != METRIC_COLUMNS:
                raise ReportError(f"{path}: inconsistent columns {header}")
            for m in read_metrics(path):
                rows.append((s["run_id"], s["fingerprint"], m["step"], m["loss"], m["pos_prob"]))
        rows.sort(key=lambda r: (r[0], int(r[2])))
        body = ["\t".join(r) for r in rows]
        return "\t".join(CURVE_COLUMNS) + "\n" + "".join(line + "\n" for line in body)
    table = []
    for run, s in zip(runs, summaries):
        table.append([s[c] for c in SUMMARY_COLUMNS] + [read_accuracy(Path(run))])

    def key(row):
        abo = float(row[REPORT_COLUMNS.index("abo")])
        return (abo != abo, abo, row[0])  # NaN ABO last

    table.sort(key=key)
    return "\t".join(REPORT_COLUMNS) + "\n" + "".join("\t".join(r) + "\n" for r in table)
