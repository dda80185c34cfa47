"""Percentile confidence intervals and replicate summaries."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ValidationError
from .resampling import ReplicateMatrix


@dataclass(frozen=True)
class IntervalEstimate:
    parameter: str
    lower: float
    upper: float
    alpha: float
    B: int

    @property
    def length(self) -> float:
        return self.upper - self.lower

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def _rank(B: int, alpha: float) -> int:
    # guard against (B+1)*alpha/2 landing just below an integer
    return math.floor((B + 1) * alpha / 2 + 1e-9)


def minimal_B(alpha: float) -> int:
    return math.ceil(2.0 / alpha - 1e-9) - 1


def percentile_interval(reps, alpha: float = 0.05) -> tuple[float, float]:
    """Order-statistic interval ``(theta*_(k), theta*_(B+1-k))``, ``k = floor((B+1) alpha/2)``.

    No interpolation is done between order statistics.
    """
    if not 0 < alpha <= 0.5:
        raise ValidationError(f"alpha must be in (0, 0.5], got {alpha}")
    x = np.sort(np.asarray(reps, dtype=float).ravel())
    B = x.size
    k = _rank(B, alpha)
    if k < 1:
        raise ValidationError(
            f"B={B} replicates are too few for alpha={alpha}; at least {minimal_B(alpha)} are needed"
        )
    return float(x[k - 1]), float(x[B - k])


@dataclass(frozen=True, eq=False)
class Summary:
    intervals: list
    mean: np.ndarray
    std: np.ndarray
    names: tuple
    replicates: np.ndarray

    def export_replicates(self, path) -> None:
        """One column per parameter, one row per replicate."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.names)
            for row in self.replicates:
                w.writerow([repr(float(v)) for v in row])


def summarize(reps: ReplicateMatrix, alpha: float = 0.05) -> Summary:
    rows = np.asarray(reps.rows, float)
    if rows.size == 0:
        raise ValidationError("no replicates to summarize")
    names = tuple(reps.names) or tuple(f"theta{i}" for i in range(rows.shape[1]))
    intervals = []
    for i, name in enumerate(names):
        lo, hi = percentile_interval(rows[:, i], alpha)
        intervals.append(IntervalEstimate(name, lo, hi, alpha, rows.shape[0]))
    std = rows.std(axis=0, ddof=1) if rows.shape[0] > 1 else np.zeros(rows.shape[1])
    return Summary(intervals, rows.mean(axis=0), std, names, rows)
