"""MCNF: a conditional spline flow over MCD prediction errors.

Training pairs each observation's context (MCD mean, log-variance and
averaged hidden proxy) with a prediction error ``y - y_mcd`` computed
against a freshly drawn MCD sample every epoch, and minimises a
prior-weighted negative log-likelihood. Inference draws errors from the
flow and adds them to resampled MCD draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StateError, TrainingError
from .mc_dropout import McdSummary, build_context, empirical_quantile, mcd_sample, prior_log_density
from .numerics import Adam
from .quantile_net import QuantileNet
from .spline_flow import ConditionalFlow


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass
class BootstrapBatch:
    indices: np.ndarray
    sample_index: np.ndarray
    delta: np.ndarray


def build_epoch_batches(y, summary: McdSummary, batch_size=32, seed=None) -> list[BootstrapBatch]:
    """Partition the training indices into mini-batches for one epoch.

    Every observation lands in exactly one batch and gets a prediction
    error against one of its MCD draws, chosen uniformly at random.
    A batch size larger than the data yields a single batch.
    """
    rng = _rng(seed)
    y = np.asarray(y, dtype=float)
    n = len(y)
    order = rng.permutation(n)
    picks = rng.integers(0, summary.n_mcd, size=n)
    batches = []
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        j = picks[start:start + batch_size]
        batches.append(BootstrapBatch(idx, j, y[idx] - summary.samples[idx, j]))
    return batches


def batch_weights(prior_log_density_values, tau: float) -> np.ndarray:
    """Temperature-scaled softmax of the prior log densities within a batch.

    Observations the MCD prior finds unlikely get small weights; as
    ``tau`` grows the weights approach ``1 / batch_size``.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    logits = np.asarray(prior_log_density_values, dtype=float) / tau
    logits = logits - logits.max()
    e = np.exp(logits)
    return e / e.sum()


@dataclass
class McnfModel:
    net: QuantileNet
    flow: ConditionalFlow
    tau: float = 1e10
    n_mcd: int = 50
    n_nf: int = 500
    trained: bool = False
    loss_trace: list = field(default_factory=list)

    @classmethod
    def build(cls, net: QuantileNet, tau=1e10, n_mcd=50, n_nf=500, layers=2, knots=16,
              tail_bound=5.0, hidden=64, seed=0) -> "McnfModel":
        flow = ConditionalFlow(net.proxy_width + 2, n_layers=layers, knots=knots,
                               tail_bound=tail_bound, hidden=hidden, seed=seed)
        return cls(net, flow, tau, n_mcd, n_nf)


def train_mcnf(model: McnfModel, x, y, epochs=100, lr=1e-3, batch_size=32, seed=0,
               summary: McdSummary | None = None) -> list[float]:
    """Fit the flow head; the base network is only ever evaluated.

    Returns the per-epoch mean of the batch losses.
    """
    rng = _rng(seed)
    y = np.asarray(y, dtype=float)
    if summary is None:
        summary = mcd_sample(model.net, x, model.n_mcd, rng)
    contexts = build_context(summary)
    prior_lp = prior_log_density(summary, y)
    flow = model.flow
    opt = Adam(flow.parameters(), lr=lr)
    trace = []
    for epoch in range(epochs):
        losses = []
        for b, batch in enumerate(build_epoch_batches(y, summary, batch_size, rng)):
            w = batch_weights(prior_lp[batch.indices], model.tau)
            lp, grads, _ = flow.log_prob_and_grad(batch.delta, contexts[batch.indices], w)
            loss = -np.sum(w * lp)
            if not np.isfinite(loss):
                bad = int(np.argmin(np.where(np.isfinite(lp), np.inf, 0.0)))
                raise TrainingError(
                    f"non-finite flow loss at epoch {epoch}, batch {b}: "
                    f"delta={batch.delta[bad]!r}, context={contexts[batch.indices[bad]].tolist()}")
            opt.step([-g for g in grads])
            losses.append(loss)
        trace.append(float(np.mean(losses)))
    model.trained = True
    model.loss_trace.extend(trace)
    return trace


@dataclass
class Inference:
    """Predictive draws for a batch of inputs; arrays are (n_inputs, n_nf)."""

    samples: np.ndarray
    densities: np.ndarray
    log_densities: np.ndarray
    delta: np.ndarray
    summary: McdSummary


def _draw_errors(model: McnfModel, x, n_nf, rng, summary=None):
    if not model.trained:
        raise StateError("the flow head has not been trained")
    if n_nf < 1:
        raise ValueError(f"n_nf must be at least 1, got {n_nf}")
    if summary is None:
        summary = mcd_sample(model.net, x, model.n_mcd, rng)
    delta, log_p = model.flow.sample(build_context(summary), n_nf, rng)
    return summary, delta, log_p


def infer(model: McnfModel, x, n_nf=None, seed=None, summary=None) -> Inference:
    """Sample the predictive distribution: a resampled MCD draw plus a flow error."""
    rng = _rng(seed)
    n_nf = model.n_nf if n_nf is None else n_nf
    summary, delta, log_p = _draw_errors(model, x, n_nf, rng, summary)
    j = rng.integers(0, summary.n_mcd, size=delta.shape)
    prior = np.take_along_axis(summary.samples, j, axis=1)
    return Inference(prior + delta, np.exp(log_p), log_p, delta, summary)


def infer_nf_ablation(model: McnfModel, x, n_nf=None, seed=None, summary=None) -> Inference:
    """Like :func:`infer` but every error is added to the MCD mean (no prior resampling)."""
    rng = _rng(seed)
    n_nf = model.n_nf if n_nf is None else n_nf
    summary, delta, log_p = _draw_errors(model, x, n_nf, rng, summary)
    return Inference(summary.mean[:, None] + delta, np.exp(log_p), log_p, delta, summary)


def interval_from_samples(samples, alpha=0.05):
    """Per-row ``(lo, hi, median)`` empirical quantiles of a sample matrix."""
    lo, med, hi = empirical_quantile(samples, [alpha, 0.5, 1.0 - alpha], axis=1)
    return lo, hi, med


def predictive_interval(model: McnfModel, x, alpha=0.05, n_nf=None, seed=None):
    return interval_from_samples(infer(model, x, n_nf, seed).samples, alpha)
