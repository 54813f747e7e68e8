"""Interval metrics and the per-method report container."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError

SIZE_LEVELS = (0.05, 0.25, 0.5, 0.75, 0.95)


def _aligned(*arrays):
    arrays = [np.asarray(a, dtype=float).ravel() for a in arrays]
    n = len(arrays[0])
    if any(len(a) != n for a in arrays):
        raise DimensionError(f"length mismatch: {[len(a) for a in arrays]}")
    return arrays


def coverage(y, lo, hi) -> float:
    """Fraction of targets inside the closed interval ``[lo, hi]``."""
    y, lo, hi = _aligned(y, lo, hi)
    return float(np.mean((y >= lo) & (y <= hi)))


def interval_size_quantiles(lo, hi, levels=SIZE_LEVELS) -> dict:
    """Empirical quantiles of interval widths, keyed by level."""
    lo, hi = _aligned(lo, hi)
    q = np.quantile(hi - lo, list(levels), method="linear")
    return {float(v): float(w) for v, w in zip(levels, q)}


def mae(y, median) -> float:
    y, median = _aligned(y, median)
    return float(np.mean(np.abs(y - median)))


def mae_q(y, lo, hi) -> float:
    """Mean over points of ``|y - lo| + |y - hi|``."""
    y, lo, hi = _aligned(y, lo, hi)
    return float(np.mean(np.abs(y - lo) + np.abs(y - hi)))


@dataclass
class IntervalReport:
    method: str
    seed: int
    y: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    median: np.ndarray
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y, self.lo, self.hi, self.median = _aligned(self.y, self.lo, self.hi, self.median)

    @property
    def coverage(self) -> float:
        return coverage(self.y, self.lo, self.hi)

    @property
    def sizes(self) -> dict:
        return interval_size_quantiles(self.lo, self.hi)

    @property
    def width(self) -> float:
        return self.sizes[0.5]

    @property
    def mae(self) -> float:
        return mae(self.y, self.median)

    @property
    def mae_q(self) -> float:
        return mae_q(self.y, self.lo, self.hi)

    def summary(self) -> dict:
        out = {"method": self.method, "seed": self.seed, "n": len(self.y),
               "coverage": self.coverage, "width": self.width, "mae": self.mae, "mae_q": self.mae_q}
        for v, w in self.sizes.items():
            out[f"width_q{v:g}"] = w
        out.update(self.extra)
        return out

    def write(self, directory):
        """Write ``report.csv`` (one row per point) and ``report.json`` (summary)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        rows = np.column_stack([self.y, self.lo, self.hi, self.median])
        covered = (self.y >= self.lo) & (self.y <= self.hi)
        tmp = directory / "report.csv.tmp"
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y", "lo", "hi", "median", "covered"])
            for r, c in zip(rows, covered):
                w.writerow([repr(float(v)) for v in r] + [int(c)])
        tmp.replace(directory / "report.csv")
        tmp = directory / "report.json.tmp"
        tmp.write_text(json.dumps(self.summary(), indent=2, sort_keys=True))
        tmp.replace(directory / "report.json")

    @classmethod
    def read(cls, directory) -> "IntervalReport":
        directory = Path(directory)
        meta = json.loads((directory / "report.json").read_text())
        data = np.loadtxt(directory / "report.csv", delimiter=",", skiprows=1, ndmin=2)
        return cls(meta["method"], meta["seed"], data[:, 0], data[:, 1], data[:, 2], data[:, 3])
