"""Deep quantile regressor with dropout (the base predictive model)."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, TrainingError
from .numerics import (
    Adam,
    BatchNormLayer,
    DenseLayer,
    DropoutLayer,
    LayerStack,
    ReLU,
    load_checkpoint,
    save_checkpoint,
)

LEVELS = (0.05, 0.5, 0.95)


def pinball_loss(y, q_hat, levels=LEVELS):
    """Summed pinball loss over the quantile levels.

    ``y`` has shape (n,) or is a scalar; ``q_hat`` has shape (n, 3) or (3,).
    Returns one non-negative value per observation.
    """
    levels = np.asarray(levels, dtype=float)
    if np.any(np.diff(levels) <= 0) or levels[0] <= 0 or levels[-1] >= 1:
        raise ValueError(f"levels must be strictly increasing in (0, 1), got {levels}")
    q_hat = np.asarray(q_hat, dtype=float)
    scalar = q_hat.ndim == 1
    q_hat = np.atleast_2d(q_hat)
    r = np.reshape(np.asarray(y, dtype=float), (-1, 1)) - q_hat
    loss = np.maximum(levels * r, (levels - 1.0) * r).sum(axis=1)
    return loss[0] if scalar else loss


def _pinball_grad(y, q_hat, levels):
    """Mean over the batch of the summed pinball loss, and its gradient."""
    n = q_hat.shape[0]
    r = y[:, None] - q_hat
    loss = np.maximum(levels * r, (levels - 1.0) * r).sum() / n
    grad = np.where(r > 0, -levels, np.where(r < 0, 1.0 - levels, 0.0)) / n
    return loss, grad


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size <= 0 or self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError(f"invalid training configuration: {self}")


@dataclass
class TrainResult:
    loss_trace: list = field(default_factory=list)


class QuantileNet:
    """BatchNorm input, ``n_hidden`` Dense+ReLU+Dropout blocks, 3-unit linear head.

    ``proxy_tap`` selects which hidden block (1-based) provides the
    representation h(x); it defaults to the last one.
    """

    def __init__(self, in_width, hidden_width=64, n_hidden=2, dropout=0.1,
                 levels=LEVELS, proxy_tap=None, seed=0, stack=None):
        self.in_width = int(in_width)
        self.hidden_width = int(hidden_width)
        self.n_hidden = int(n_hidden)
        self.dropout = float(dropout)
        self.levels = tuple(float(v) for v in levels)
        if len(self.levels) != 3:
            raise ConfigError("the quantile head has exactly three units")
        self.proxy_tap = self.n_hidden if proxy_tap is None else int(proxy_tap)
        if not 1 <= self.proxy_tap <= self.n_hidden:
            raise ConfigError(f"proxy_tap must be in 1..{self.n_hidden}, got {self.proxy_tap}")
        self.seed = seed
        if stack is None:
            rng = np.random.default_rng(seed)
            layers = [BatchNormLayer(self.in_width)]
            width = self.in_width
            for _ in range(self.n_hidden):
                layers += [DenseLayer(width, self.hidden_width, rng), ReLU(), DropoutLayer(self.dropout)]
                width = self.hidden_width
            layers.append(DenseLayer(width, 3, rng))
            stack = LayerStack(layers)
        self.stack = stack

    @property
    def head(self) -> DenseLayer:
        return self.stack.layers[-1]

    @property
    def proxy_width(self) -> int:
        return self.hidden_width

    def _tap_position(self):
        # BN, then (Dense, ReLU, Dropout) per block; tap the ReLU output
        return 1 + 3 * (self.proxy_tap - 1) + 1

    def run(self, x, dropout_active=False, rng=None):
        """One inference pass returning ``(quantiles (n, 3), proxy (n, width))``."""
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None] if self.in_width == 1 else x[None, :]
        if x.shape[1] != self.in_width:
            raise DimensionError(f"expected {self.in_width} features, got {x.shape[1]}")
        self.stack.set_dropout(dropout_active)
        try:
            out, outputs = self.stack.forward(x, training=False, rng=rng, record=True)
        finally:
            self.stack.set_dropout(False)
        return out, outputs[self._tap_position()]

    def predict_quantiles(self, x, dropout_active=False, rng=None):
        return self.run(x, dropout_active, rng)[0]

    def hidden_proxy(self, x, dropout_active=False, rng=None):
        return self.run(x, dropout_active, rng)[1]

    def parameter_hash(self) -> str:
        h = hashlib.sha256()
        for a in self.stack.state_arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def copy(self) -> "QuantileNet":
        return QuantileNet(self.in_width, self.hidden_width, self.n_hidden, self.dropout,
                           self.levels, self.proxy_tap, self.seed, stack=self.stack.copy())

    def save(self, path):
        meta = {"in_width": self.in_width, "hidden_width": self.hidden_width,
                "n_hidden": self.n_hidden, "dropout": self.dropout,
                "levels": list(self.levels), "proxy_tap": self.proxy_tap}
        save_checkpoint(path, self.stack, seed=self.seed, meta=meta)

    @classmethod
    def load(cls, path) -> "QuantileNet":
        stack, header = load_checkpoint(path)
        m = header["meta"]
        return cls(m["in_width"], m["hidden_width"], m["n_hidden"], m["dropout"],
                   m["levels"], m["proxy_tap"], header["seed"], stack=stack)


def train(net: QuantileNet, x, y, config: TrainConfig | None = None) -> TrainResult:
    """Fit ``net`` in place with Adam on mini-batch pinball loss."""
    config = config or TrainConfig()
    x = np.asarray(x, dtype=float).reshape(len(y), -1)
    y = np.asarray(y, dtype=float)
    levels = np.asarray(net.levels)
    rng = np.random.default_rng(config.seed)
    opt = Adam(net.stack.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    result = TrainResult()
    n = len(y)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            out = net.stack.forward(x[idx], training=True, rng=rng)
            loss, grad = _pinball_grad(y[idx], out, levels)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite pinball loss at epoch {epoch}, batch {b}")
            net.stack.backward(grad)
            opt.step(net.stack.gradients())
            total += loss * len(idx)
        result.loss_trace.append(total / n)
    return result
