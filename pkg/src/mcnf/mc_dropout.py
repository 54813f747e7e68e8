"""Monte Carlo dropout sampling, summary statistics and the baselines built on it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quantile_net import QuantileNet

VAR_FLOOR = 1e-12
# rows per vectorised forward pass; fixed so random streams do not depend on input size
_CHUNK_ROWS = 32768


@dataclass
class McdSummary:
    """MCD draws for a batch of observations.

    samples: (n, n_mcd) median-head draws with dropout active
    mean:    (n,) sample mean
    log_var: (n,) log of the floored unbiased sample variance
    proxy:   (n, width) hidden representation averaged over the passes
    """

    samples: np.ndarray
    mean: np.ndarray
    log_var: np.ndarray
    proxy: np.ndarray

    @classmethod
    def from_draws(cls, samples, proxy):
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        if samples.shape[1] < 2:
            raise ValueError("at least two MCD samples are needed for a variance")
        var = np.maximum(samples.var(axis=1, ddof=1), VAR_FLOOR)
        return cls(samples, samples.mean(axis=1), np.log(var), np.atleast_2d(proxy))

    @property
    def n_mcd(self) -> int:
        return self.samples.shape[1]

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    def __len__(self):
        return self.samples.shape[0]

    def subset(self, idx) -> "McdSummary":
        return McdSummary(self.samples[idx], self.mean[idx], self.log_var[idx], self.proxy[idx])


def _as_rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def mc_passes(net: QuantileNet, x, n_passes: int, seed=None, with_proxy=False):
    """Run ``n_passes`` dropout-active passes over every row of ``x``.

    Returns quantile outputs of shape (n_passes, n, 3) and, if requested,
    the summed proxy over passes (n, width).
    """
    rng = _as_rng(seed)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if net.in_width == 1 else x[None, :]
    n = x.shape[0]
    if net.dropout == 0:
        # every pass is the deterministic pass
        q, h = net.run(x)
        out = np.broadcast_to(q, (n_passes,) + q.shape).copy()
        return (out, h * n_passes) if with_proxy else out
    per_chunk = max(1, _CHUNK_ROWS // max(n, 1))
    out = np.empty((n_passes, n, 3))
    proxy_sum = np.zeros((n, net.proxy_width)) if with_proxy else None
    done = 0
    while done < n_passes:
        k = min(per_chunk, n_passes - done)
        q, h = net.run(np.tile(x, (k, 1)), dropout_active=True, rng=rng)
        out[done:done + k] = q.reshape(k, n, 3)
        if with_proxy:
            proxy_sum += h.reshape(k, n, -1).sum(axis=0)
        done += k
    return (out, proxy_sum) if with_proxy else out


def mcd_sample(net: QuantileNet, x, n_mcd: int = 50, seed=None) -> McdSummary:
    """Draw ``n_mcd`` median predictions and hidden proxies per observation."""
    if n_mcd < 2:
        raise ValueError(f"n_mcd must be at least 2, got {n_mcd}")
    q, proxy_sum = mc_passes(net, x, n_mcd, seed, with_proxy=True)
    return McdSummary.from_draws(q[:, :, 1].T, proxy_sum / n_mcd)


def build_context(summary: McdSummary) -> np.ndarray:
    """Context rows ``[mean, log_var, proxy...]``, shape (n, width + 2)."""
    return np.column_stack([summary.mean, summary.log_var, summary.proxy])


def prior_log_density(summary: McdSummary, y) -> np.ndarray:
    """Gaussian log density of ``y`` under each observation's MCD mean and variance."""
    var = summary.var
    y = np.asarray(y, dtype=float)
    return -0.5 * np.log(2.0 * np.pi * var) - 0.5 * (y - summary.mean) ** 2 / var


def empirical_quantile(values, q, axis=-1):
    """Linear interpolation between order statistics (numpy's default rule)."""
    return np.quantile(values, q, axis=axis, method="linear")


def mcd_predictive_intervals(net, x, n_resamples=1000, alpha=0.05, seed=None, passes=None):
    """MCD baseline: empirical (alpha, 1 - alpha) quantiles and median of the median-head draws."""
    if passes is None:
        passes = mc_passes(net, x, n_resamples, seed)
    draws = passes[:, :, 1]
    lo, med, hi = empirical_quantile(draws, [alpha, 0.5, 1.0 - alpha], axis=0)
    return lo, hi, med


def mcqr_intervals(net, x, n_resamples=1000, seed=None, passes=None):
    """MCQR baseline: the lower/upper heads averaged over dropout passes.

    Returns ``(lo, hi, median)``; the median is the averaged median head.
    """
    if passes is None:
        passes = mc_passes(net, x, n_resamples, seed)
    # shifted mean: exact when every pass agrees (dropout off)
    mean = passes[0] + (passes - passes[0]).mean(axis=0)
    return mean[:, 0], mean[:, 2], mean[:, 1]
