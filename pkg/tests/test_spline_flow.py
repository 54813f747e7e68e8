import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, rel_err
from mcnf.errors import DimensionError
from mcnf.spline_flow import (
    ConditionalFlow,
    RqSpline,
    flow_log_prob,
    flow_sample,
    identity_raw,
    spline_forward,
    spline_inverse,
)

K, B = 16, 5.0


def random_spline(rng, scale=1.5):
    return RqSpline.from_raw(rng.normal(scale=scale, size=(1, 3 * K - 1)), K, B)


def random_flow(seed, width=4, scale=0.25):
    # larger scales give spikes narrower than the quadrature grid
    flow = ConditionalFlow(width, n_layers=2, knots=K, tail_bound=B, hidden=16, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for p in flow.parameters():
        p[...] = rng.normal(scale=scale, size=p.shape)
    return flow


def identity_spline():
    return RqSpline.from_raw(identity_raw(K)[None, :], K, B)


def test_identity_spline():
    z = np.linspace(-B, B, 101)
    x, ld = spline_forward(identity_spline(), z)
    np.testing.assert_allclose(x, z, atol=1e-12)
    np.testing.assert_allclose(ld, 0.0, atol=1e-12)
    zi, _ = spline_inverse(identity_spline(), z)
    np.testing.assert_allclose(zi, z, atol=1e-12)


def test_linear_tails():
    s = random_spline(np.random.default_rng(0))
    for z in (B + 1, -B - 3.5):
        x, ld = spline_forward(s, z)
        assert x == z and ld == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_log_det_matches_finite_difference(seed):
    s = random_spline(np.random.default_rng(seed))
    h = 1e-6
    (xp, _), (xm, _) = spline_forward(s, 0.3 + h), spline_forward(s, 0.3 - h)
    _, ld = spline_forward(s, 0.3)
    assert abs(ld - math.log((xp - xm) / (2 * h))) <= 1e-4


def test_grid_round_trip():
    rng = np.random.default_rng(1)
    x = np.linspace(-B, B, 1000)
    for _ in range(20):
        s = random_spline(rng)
        z, _ = spline_inverse(s, x)
        back, _ = spline_forward(s, z)
        assert np.max(np.abs(back - x)) <= 1e-6


def test_inverse_log_det_is_negated_forward():
    rng = np.random.default_rng(2)
    s = random_spline(rng)
    x = rng.uniform(-B, B, 200)
    z, ld_inv = spline_inverse(s, x)
    _, ld_fwd = spline_forward(s, z)
    np.testing.assert_allclose(ld_inv, -ld_fwd, atol=1e-10)


def test_monotone_on_fine_grid():
    rng = np.random.default_rng(3)
    z = np.linspace(-1.5 * B, 1.5 * B, 10000)
    for _ in range(10):
        x, _ = spline_forward(random_spline(rng, scale=3.0), z)
        assert np.all(np.diff(x) > 0)


def test_minimum_bin_and_derivative():
    raw = np.full((1, 3 * K - 1), 0.0)
    raw[0, 0] = 60.0
    raw[0, 2 * K:] = -60.0
    s = RqSpline.from_raw(raw, K, B)
    assert s.widths.min() >= 1e-3 * 2 * B * (1 - 1e-12)
    assert s.derivs.min() >= 1e-3 * (1 - 1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3 * B, 3 * B))
def test_flow_invertible(seed, delta):
    flow = random_flow(seed % 50)
    c = np.random.default_rng(seed).normal(size=(1, 4))
    splines = flow.splines(c)
    u = np.array([delta])
    for s in reversed(splines):
        u, _ = s.inverse(u)
    for s in splines:
        u, _ = s.forward(u)
    assert abs(u[0] - delta) <= 1e-6


def test_identity_flow_is_standard_normal():
    flow = ConditionalFlow(3, seed=0)
    assert flow_log_prob(flow, 0.0, np.zeros(3))[0] == pytest.approx(-0.918939, abs=1e-6)


def test_context_width_mismatch():
    flow = ConditionalFlow(3, seed=0)
    with pytest.raises(DimensionError):
        flow_log_prob(flow, 0.0, np.zeros(4))


@pytest.mark.parametrize("seed", range(10))
def test_density_normalizes(seed):
    flow = random_flow(seed)
    c = np.random.default_rng(seed).normal(size=(1, 4))
    grid = np.linspace(-20, 20, 20001)
    dens = np.exp(flow_log_prob(flow, grid, c))
    assert abs(np.trapezoid(dens, grid) - 1.0) <= 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_parameter_gradients_match_finite_differences(seed):
    flow = random_flow(seed, width=3, scale=0.3)
    rng = np.random.default_rng(seed)
    c = rng.normal(size=(12, 3))
    delta = rng.normal(scale=3.0, size=12)
    w = rng.uniform(0.1, 1.0, size=12)

    def objective():
        return float(np.sum(w * flow.log_prob(delta, c)))

    _, grads, _ = flow.log_prob_and_grad(delta, c, weights=w)
    params = flow.parameters()
    numeric = central_diff(objective, params, h=1e-6)
    for g, n in zip(grads, numeric):
        assert rel_err(g, n) <= 1e-4


def test_delta_gradient_matches_finite_difference():
    flow = random_flow(7, width=3)
    rng = np.random.default_rng(7)
    c = rng.normal(size=(8, 3))
    delta = rng.normal(scale=2.0, size=8)
    _, _, g_delta = flow.log_prob_and_grad(delta, c)
    h = 1e-6
    fd = (flow.log_prob(delta + h, c) - flow.log_prob(delta - h, c)) / (2 * h)
    assert rel_err(g_delta, fd) <= 1e-6


def test_sample_log_probs_consistent():
    flow = random_flow(4)
    c = np.random.default_rng(0).normal(size=(3, 4))
    samples, lp = flow_sample(flow, c, 200, seed=1)
    for row in range(3):
        np.testing.assert_allclose(lp[row], flow_log_prob(flow, samples[row], c[row]), atol=1e-10)


def test_sample_seeded_and_centered():
    flow = ConditionalFlow(2, seed=0)
    a, _ = flow_sample(flow, np.zeros(2), 10000, seed=5)
    b, _ = flow_sample(flow, np.zeros(2), 10000, seed=5)
    assert np.array_equal(a, b)
    assert abs(a.mean()) <= 0.04


def test_histogram_matches_density():
    flow = random_flow(11)
    c = np.random.default_rng(11).normal(size=(1, 4))
    n = 100_000
    samples, _ = flow_sample(flow, c, n, seed=3)
    lo, hi = np.quantile(samples, [0.005, 0.995])
    edges = np.linspace(lo, hi, 41)
    counts, _ = np.histogram(samples[0], bins=edges)
    fine = np.linspace(lo, hi, 40 * 200 + 1)
    dens = np.exp(flow_log_prob(flow, fine, c))
    expected = np.array([np.trapezoid(dens[i * 200:(i + 1) * 200 + 1], fine[i * 200:(i + 1) * 200 + 1])
                         for i in range(40)]) * n
    se = np.sqrt(expected)
    assert np.all(np.abs(counts - expected) <= 3 * se + 1)
    # chi-square over the bins stays within a generous bound for 40 degrees of freedom
    assert np.sum((counts - expected) ** 2 / expected) < 80


def test_save_load_round_trip(tmp_path):
    flow = random_flow(2)
    path = tmp_path / "flow.ckpt"
    flow.save(path, seed=2)
    loaded = ConditionalFlow.load(path)
    c = np.random.default_rng(0).normal(size=(5, 4))
    d = np.linspace(-3, 3, 5)
    assert np.array_equal(loaded.log_prob(d, c), flow.log_prob(d, c))
    for a, b in zip(loaded.parameters(), flow.parameters()):
        assert np.array_equal(a, b)
