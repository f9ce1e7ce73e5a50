"""Completion metrics: Chamfer distance, its one-sided variant, F1 and MMD.

All distances are computed exactly in float64 on clouds in normalized
coordinates. Table scalings (CD x1e4, MMD x1e2) are applied only when a
report is written out.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgument
from .geometry import as_cloud, nearest_sq_dists

DEFAULT_TAU = 0.01
CSV_HEADER = ["category", "cd_x1e4", "f1", "ucd_x1e4", "mmd_x1e2", "tau"]


def ucd(partial, predicted) -> float:
    """Mean squared distance from each partial point to the nearest predicted point."""
    return float(nearest_sq_dists(as_cloud(partial, "partial"), as_cloud(predicted, "predicted")).mean())


def chamfer(a, b) -> float:
    a = as_cloud(a, "a")
    b = as_cloud(b, "b")
    return float(nearest_sq_dists(a, b).mean() + nearest_sq_dists(b, a).mean())


def f1(predicted, truth, tau: float = DEFAULT_TAU) -> float:
    """Harmonic mean of accuracy and completeness at Euclidean threshold ``tau``."""
    if not tau > 0:
        raise InvalidArgument(f"tau must be positive, got {tau}")
    pred = as_cloud(predicted, "predicted")
    gt = as_cloud(truth, "truth")
    acc = float((np.sqrt(nearest_sq_dists(pred, gt)) < tau).mean())
    comp = float((np.sqrt(nearest_sq_dists(gt, pred)) < tau).mean())
    if acc + comp == 0:
        return 0.0
    return 2 * acc * comp / (acc + comp)


def mmd(completions: Sequence, references: Sequence) -> float:
    """Mean over references of the smallest Chamfer distance to any completion."""
    if len(completions) == 0 or len(references) == 0:
        raise InvalidArgument("mmd needs non-empty completion and reference sets")
    best = [min(chamfer(c, r) for c in completions) for r in references]
    return float(np.mean(best))


@dataclass
class MetricReport:
    """Aggregated metrics; ``None`` marks a value that could not be computed."""

    cd: Optional[float] = None
    ucd: Optional[float] = None
    f1: Optional[float] = None
    mmd: Optional[float] = None
    tau: float = DEFAULT_TAU
    per_category: dict = field(default_factory=dict)

    def rows(self):
        for name, rep in sorted(self.per_category.items()):
            yield _row(name, rep, self.tau)
        yield _row("all", self, self.tau)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            writer.writerows(self.rows())


def _fmt(value, scale):
    return "" if value is None else f"{value * scale:.4f}"


def _row(name, rep, tau):
    return [name, _fmt(rep.cd, 1e4), _fmt(rep.f1, 1.0), _fmt(rep.ucd, 1e4), _fmt(rep.mmd, 1e2), f"{tau:g}"]


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise InvalidArgument(f"unexpected report header {reader.fieldnames}")
        return list(reader)
