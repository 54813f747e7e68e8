"""Split-conformal calibration of quantile intervals (CQR and MCCP)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError
from .mc_dropout import mc_passes, mcqr_intervals
from .metrics import IntervalReport


@dataclass(frozen=True)
class CalibrationSplit:
    calibration: np.ndarray
    evaluation: np.ndarray
    alpha: float = 0.1

    def __post_init__(self):
        if np.intersect1d(self.calibration, self.evaluation).size:
            raise ValueError("calibration and evaluation sets overlap")


def calibration_split(n_test: int, cal_fraction=0.2, alpha=0.1, seed=None) -> CalibrationSplit:
    """Carve a seeded calibration subset out of ``range(n_test)``."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n_test)
    n_cal = int(round(cal_fraction * n_test))
    return CalibrationSplit(np.sort(order[:n_cal]), np.sort(order[n_cal:]), alpha)


def cqr_score(y, lo, hi):
    """Signed distance outside the interval; negative strictly inside."""
    y, lo, hi = (np.asarray(a, dtype=float) for a in (y, lo, hi))
    return np.maximum(lo - y, y - hi)


def conformal_rank(n_cal: int, alpha: float) -> int:
    # guard against 0.9 * 100 landing a hair above an integer
    return math.ceil((n_cal + 1) * (1.0 - alpha) - 1e-9)


def calibrate(scores, alpha=0.1) -> float:
    """The ``ceil((n+1)(1-alpha))``-th smallest score."""
    scores = np.sort(np.asarray(scores, dtype=float).ravel())
    n = len(scores)
    k = conformal_rank(n, alpha)
    if k > n:
        need = math.ceil(1.0 / alpha - 1e-9) - 1
        raise CalibrationError(f"{n} calibration points are too few for alpha={alpha}; need at least {need}")
    return float(scores[k - 1])


def conformalize(lo, hi, q_hat):
    """Widen (or shrink, for negative ``q_hat``) both ends by ``q_hat``.

    Adjusted endpoints that cross are reported as ``[min, max]``.
    """
    a = np.asarray(lo, dtype=float) - q_hat
    b = np.asarray(hi, dtype=float) + q_hat
    return np.minimum(a, b), np.maximum(a, b)


def _run(lo, hi, med, y, split: CalibrationSplit, method, seed):
    cal, ev = split.calibration, split.evaluation
    q_hat = calibrate(cqr_score(y[cal], lo[cal], hi[cal]), split.alpha)
    a, b = conformalize(lo[ev], hi[ev], q_hat)
    return IntervalReport(method, seed, y[ev], a, b, med[ev], extra={"q_hat": q_hat})


def run_cqr(net, x_test, y_test, split: CalibrationSplit, seed=0) -> IntervalReport:
    """Conformalize the deterministic lower/upper heads."""
    q = net.predict_quantiles(x_test)
    return _run(q[:, 0], q[:, 2], q[:, 1], np.asarray(y_test, float), split, "CQR", seed)


def run_mccp(net, x_test, y_test, split: CalibrationSplit, n_resamples=1000, seed=0,
             passes=None) -> IntervalReport:
    """Conformalize the MC-dropout-averaged lower/upper heads."""
    if passes is None:
        passes = mc_passes(net, x_test, n_resamples, seed)
    lo, hi, med = mcqr_intervals(net, x_test, passes=passes)
    return _run(lo, hi, med, np.asarray(y_test, float), split, "MCCP", seed)
