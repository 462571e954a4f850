"""Dice scoring, threshold sweeps, per-stage summary statistics, and CSV
report emission."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .inference import threshold_map

STAGE_OPTIMAL = "optimal"
STAGE_INPUT_SRF = "input_S_RF"
STAGE_P = "P(x)"
STAGE_GP = "G(P(x))"
_STAGES = (STAGE_OPTIMAL, STAGE_INPUT_SRF, STAGE_P, STAGE_GP)


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); two empty masks agree vacuously (1.0)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


@dataclass
class DiceReport:
    stage: str
    per_case: list[float]
    n_s: int | None = None
    mean: float = field(init=False)
    std: float = field(init=False)
    min: float = field(init=False)
    max: float = field(init=False)

    def __post_init__(self):
        if self.stage not in _STAGES:
            raise ValueError(f"unknown stage tag {self.stage!r}")
        if not self.per_case:
            raise ValueError("per-case Dice list is empty")
        arr = np.asarray(self.per_case, dtype=np.float64)
        self.mean = float(arr.mean())
        self.std = float(arr.std())  # population std
        self.min = float(arr.min())
        self.max = float(arr.max())

    @property
    def label(self) -> str:
        if self.n_s is None:
            return self.stage
        return f"{self.stage} w. N_s={self.n_s}"


def summarize(stage: str, per_case, n_s: int | None = None) -> DiceReport:
    return DiceReport(stage=stage, per_case=[float(d) for d in per_case],
                      n_s=n_s)


@dataclass
class SweepCurve:
    thresholds: list[float]
    mean_dice: list[float]
    variant: str = "unsmoothed"   # "unsmoothed" | "smoothed"
    n_s: int | None = None

    def __post_init__(self):
        t = np.asarray(self.thresholds, dtype=np.float64)
        if len(t) == 0 or (np.diff(t) <= 0).any():
            raise ValueError("thresholds must be strictly ascending")
        if t.min() < 0 or t.max() > 1:
            raise ValueError("thresholds must lie in [0,1]")
        if len(self.mean_dice) != len(t):
            raise ValueError("one Dice value per threshold required")

    @property
    def argmax_threshold(self) -> float:
        return float(self.thresholds[int(np.argmax(self.mean_dice))])


def default_thresholds() -> list[float]:
    return [round(0.05 * i, 2) for i in range(1, 20)]


def sweep_thresholds(pmap: np.ndarray, gt: np.ndarray, thresholds=None,
                     variant: str = "unsmoothed",
                     n_s: int | None = None) -> SweepCurve:
    """Dice of threshold_map(pmap, p) against gt for each threshold."""
    thresholds = list(thresholds) if thresholds is not None \
        else default_thresholds()
    if np.asarray(pmap).shape != np.asarray(gt).shape:
        raise ValueError("probability map and mask dims differ")
    scores = [dice(threshold_map(pmap, p), gt) for p in thresholds]
    return SweepCurve(thresholds=thresholds, mean_dice=scores,
                      variant=variant, n_s=n_s)


def mean_curves(curves: list[SweepCurve]) -> SweepCurve:
    """Average per-case sweep curves sharing a grid and variant."""
    if not curves:
        raise ValueError("no curves to average")
    base = curves[0]
    for c in curves[1:]:
        if c.thresholds != base.thresholds or c.variant != base.variant \
                or c.n_s != base.n_s:
            raise ValueError("curves must share thresholds and variant")
    stacked = np.asarray([c.mean_dice for c in curves])
    return SweepCurve(thresholds=list(base.thresholds),
                      mean_dice=stacked.mean(axis=0).tolist(),
                      variant=base.variant, n_s=base.n_s)


def emit_report(reports: list[DiceReport], curves: list[SweepCurve],
                out_dir: str, case_names: list[str] | None = None) -> None:
    """Write per_case.csv, aggregate.csv, and sweep.csv.

    aggregate.csv mirrors the columns-per-stage layout (one column per
    stage/scale variant, Mean/Std/Min/Max rows); sweep.csv is only written
    when curves exist.
    """
    if not reports:
        raise ValueError("need at least one report")
    ncases = len(reports[0].per_case)
    for r in reports:
        if len(r.per_case) != ncases:
            raise ValueError("reports cover differing case counts")
    if case_names is None:
        case_names = [f"case_{i}" for i in range(ncases)]

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "per_case.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case"] + [r.label for r in reports])
        for i, name in enumerate(case_names):
            writer.writerow([name] + [repr(r.per_case[i]) for r in reports])

    with open(os.path.join(out_dir, "aggregate.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["statistic"] + [r.label for r in reports])
        for stat in ("mean", "std", "min", "max"):
            writer.writerow([stat] + [repr(getattr(r, stat))
                                      for r in reports])

    if curves:
        write_sweep_csv(curves, os.path.join(out_dir, "sweep.csv"))


def write_sweep_csv(curves: list[SweepCurve], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "n_s", "threshold", "mean_dice"])
        for curve in curves:
            for t, d in zip(curve.thresholds, curve.mean_dice):
                writer.writerow([curve.variant,
                                 "" if curve.n_s is None else curve.n_s,
                                 repr(t), repr(d)])
