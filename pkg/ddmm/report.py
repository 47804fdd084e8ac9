"""Collect the CSV outputs found under a run directory into ``report.csv`` and
render ``loss_curves.png`` and ``metrics.png``."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import ValidationError  # noqa: E402

logger = logging.getLogger(__name__)

REPORT_FILES = ("report.csv", "loss_curves.png", "metrics.png")
PNG_METADATA = {"Software": None}
SKIP_METRICS = {"n_real", "n_fake", "extractor_seed"}


@dataclass
class RunTables:
    curves: Dict[str, Dict[str, List[Tuple[int, float]]]] = field(default_factory=dict)
    scalars: List[Tuple[str, str, float]] = field(default_factory=list)


def _read(path: Path) -> Tuple[List[str], List[List[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return [], []
    return rows[0], rows[1:]


def _number(text: str) -> Optional[float]:
    try:
        value = float(text)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def collect(run_dir: Path) -> RunTables:
    """Recognize training logs, segmenter loss curves, quality reports,
    segmentation evaluations and consistency scores by their CSV headers."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ValidationError(f"run directory {run_dir} does not exist")
    tables = RunTables()
    for path in sorted(run_dir.rglob("*.csv")):
        rel = path.relative_to(run_dir).as_posix()
        if rel == "report.csv":
            continue
        header, rows = _read(path)
        if not header:
            continue
        if header[0] == "epoch":
            series: Dict[str, List[Tuple[int, float]]] = {}
            for row in rows:
                for name, cell in zip(header[1:], row[1:]):
                    value = _number(cell)
                    if value is not None:
                        series.setdefault(name, []).append((int(row[0]), value))
            tables.curves[rel] = series
            for name, points in series.items():
                tables.scalars.append((rel, f"final_{name}", points[-1][1]))
        elif header[0] == "fid" or header[0] == "matched_dice":
            for name, cell in zip(header, rows[0] if rows else []):
                value = _number(cell)
                if value is not None and name not in SKIP_METRICS:
                    tables.scalars.append((rel, name, value))
        elif header == ["name", "dice", "rand"]:
            for row in rows:
                if row[0] == "mean":
                    tables.scalars.append((rel, "dice_mean", float(row[1])))
                    tables.scalars.append((rel, "rand_mean", float(row[2])))
    return tables


def write_report_csv(tables: RunTables, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["source", "metric", "value"])
        for source, metric, value in tables.scalars:
            writer.writerow([source, metric, repr(value)])


def plot_loss_curves(tables: RunTables, path: Path) -> None:
    fig, ax = plt.subplots(figsize=(6.4, 4.0), dpi=100)
    for source, series in tables.curves.items():
        for name, points in series.items():
            if name.startswith("vlb"):
                continue
            xs, ys = zip(*points)
            ax.plot(xs, ys, marker=".", label=f"{source}: {name}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if ax.has_data():
        ax.set_yscale("log")
        ax.legend(fontsize="small")
    else:
        ax.text(0.5, 0.5, "no training logs", ha="center", va="center", transform=ax.transAxes)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=PNG_METADATA)
    plt.close(fig)


def plot_metrics(tables: RunTables, path: Path) -> None:
    bars = [(f"{source}: {metric}", value) for source, metric, value in tables.scalars if not metric.startswith("final_")]
    fig, ax = plt.subplots(figsize=(6.4, max(2.0, 0.35 * len(bars) + 1.0)), dpi=100)
    if bars:
        labels, values = zip(*bars)
        ax.barh(range(len(bars)), values)
        ax.set_yticks(range(len(bars)))
        ax.set_yticklabels(labels, fontsize="small")
        ax.invert_yaxis()
    else:
        ax.text(0.5, 0.5, "no metric tables", ha="center", va="center", transform=ax.transAxes)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=PNG_METADATA)
    plt.close(fig)


def build_report(run_dir: Path, out_dir: Optional[Path] = None) -> RunTables:
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    tables = collect(run_dir)
    write_report_csv(tables, out_dir / "report.csv")
    plot_loss_curves(tables, out_dir / "loss_curves.png")
    plot_metrics(tables, out_dir / "metrics.png")
    logger.info("report: %d curves, %d scalars", len(tables.curves), len(tables.scalars))
    return tables
