import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from mcnf.conformal import (
    CalibrationSplit,
    calibrate,
    calibration_split,
    conformal_rank,
    conformalize,
    cqr_score,
    run_cqr,
    run_mccp,
)
from mcnf.errors import CalibrationError
from mcnf.quantile_net import QuantileNet


class FixedHeads:
    """Stand-in network with fixed lower/median/upper outputs."""

    def __init__(self, q):
        self.q = np.asarray(q, dtype=float)

    def predict_quantiles(self, x):
        return self.q


def test_score_examples():
    assert cqr_score(3, 2, 4) == -1
    assert cqr_score(5, 2, 4) == 1
    assert cqr_score(2, 2, 4) == 0


def test_score_crossed_interval_is_total():
    assert cqr_score(3, 4, 2) == 1


def test_calibrate_one_to_ninety_nine():
    assert conformal_rank(99, 0.1) == 90
    assert calibrate(np.arange(1, 100)[::-1], 0.1) == 90


def test_calibrate_equal_scores():
    assert calibrate(np.full(40, 0.37), 0.1) == 0.37


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=9, max_size=300), st.sampled_from([0.05, 0.1, 0.2]))
def test_calibrate_matches_sort_oracle(scores, alpha):
    n = len(scores)
    k = int(np.ceil(round((n + 1) * (1 - alpha), 9)))
    if k > n:
        with pytest.raises(CalibrationError):
            calibrate(scores, alpha)
    else:
        assert calibrate(scores, alpha) == sorted(scores)[k - 1]


def test_too_few_points_names_minimum():
    with pytest.raises(CalibrationError, match="at least 9"):
        calibrate(np.arange(5.0), 0.1)


def test_conformalize_examples():
    assert conformalize(2.0, 4.0, 0.0) == (2.0, 4.0)
    assert conformalize(2.0, 4.0, 0.5) == (1.5, 4.5)
    lo, hi = conformalize(2.0, 4.0, -0.2)
    assert lo == pytest.approx(2.2) and hi == pytest.approx(3.8)


def test_conformalize_clamps_crossing():
    lo, hi = conformalize(2.0, 4.0, -1.5)
    assert lo <= hi
    assert (lo, hi) == (2.5, 3.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.floats(0, 10), st.floats(-5, 5), st.floats(0, 5))
def test_conformalize_monotone_in_q(lo, width, q, dq):
    # past q = -width / 2 the endpoints cross and the clamp takes over
    assume(q >= -width / 2)
    a = conformalize(lo, lo + width, q)
    b = conformalize(lo, lo + width, q + dq)
    assert b[1] - b[0] >= a[1] - a[0] - 1e-9


def test_split_disjoint_and_seeded():
    a = calibration_split(100, 0.2, seed=3)
    b = calibration_split(100, 0.2, seed=3)
    assert len(a.calibration) == 20 and len(a.evaluation) == 80
    assert np.array_equal(a.calibration, b.calibration)
    assert not set(a.calibration) & set(a.evaluation)
    with pytest.raises(ValueError):
        CalibrationSplit(np.array([1, 2]), np.array([2, 3]))


def test_simulated_coverage_guarantee():
    rng = np.random.default_rng(0)
    covs = []
    for _ in range(100):
        x = rng.uniform(0, 3, size=500)
        y = x + (0.2 + 0.5 * x) * rng.normal(size=500)
        # deliberately mis-sized base interval
        q = np.column_stack([x - 0.4, x, x + 0.4])
        split = calibration_split(500, 0.2, 0.1, seed=int(rng.integers(1 << 31)))
        covs.append(run_cqr(FixedHeads(q), None, y, split).coverage)
    assert np.mean(covs) >= 0.88


def test_over_wide_base_shrinks():
    rng = np.random.default_rng(1)
    y = rng.normal(size=400)
    q = np.column_stack([np.full(400, -10.0), np.zeros(400), np.full(400, 10.0)])
    split = calibration_split(400, 0.2, seed=0)
    rep = run_cqr(FixedHeads(q), None, y, split)
    assert rep.extra["q_hat"] <= 0
    assert np.all(rep.hi - rep.lo <= 20.0)


def test_mccp_without_dropout_equals_cqr():
    net = QuantileNet(2, dropout=0.0, seed=0)
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(200, 2)), rng.normal(size=200)
    split = calibration_split(200, 0.2, seed=1)
    cqr = run_cqr(net, x, y, split, seed=1)
    mccp = run_mccp(net, x, y, split, n_resamples=1000, seed=1)
    assert np.array_equal(cqr.lo, mccp.lo)
    assert np.array_equal(cqr.hi, mccp.hi)
    assert np.array_equal(cqr.median, mccp.median)
