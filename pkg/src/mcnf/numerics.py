"""Dense layers with hand-written backward passes, plus Adam.

Only the handful of layer types the models in this package need are
provided. Every layer works on 2-D float64 batches ``(n, features)``.
Parameter gradients are written to ``layer.grads`` by ``backward`` and are
consumed by :class:`Adam`; nothing but ``Adam.step`` mutates parameters.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DimensionError, StateError, TrainingError

__all__ = [
    "DenseLayer",
    "ReLU",
    "DropoutLayer",
    "BatchNormLayer",
    "LayerStack",
    "Adam",
    "save_checkpoint",
    "load_checkpoint",
]

DTYPE = np.float64


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DimensionError(f"expected a 1-D or 2-D input, got shape {x.shape}")
    return x


class Layer:
    """Common plumbing: named parameters, named buffers, cached state."""

    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def spec(self) -> dict:
        return {"type": self.kind}

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def _require_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called without a cached forward pass")
        return self._cache


class DenseLayer(Layer):
    """Affine map ``x @ W.T + b`` with ``W`` of shape (out, in)."""

    kind = "dense"

    def __init__(self, fan_in: int, fan_out: int, rng=None):
        super().__init__()
        self.fan_in = int(fan_in)
        self.fan_out = int(fan_out)
        rng = np.random.default_rng(rng)
        # He-uniform fan-in scaling for ReLU stacks
        bound = np.sqrt(6.0 / self.fan_in)
        self.params["weight"] = rng.uniform(-bound, bound, size=(self.fan_out, self.fan_in))
        self.params["bias"] = np.zeros(self.fan_out, dtype=DTYPE)

    def spec(self):
        return {"type": self.kind, "fan_in": self.fan_in, "fan_out": self.fan_out}

    def forward(self, x, training=False, rng=None):
        x = _as_batch(x)
        if x.shape[1] != self.fan_in:
            raise DimensionError(f"dense layer expects width {self.fan_in}, got {x.shape[1]}")
        if training:
            self._cache = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad_out):
        x = self._require_cache()
        self.grads["weight"] = grad_out.T @ x
        self.grads["bias"] = grad_out.sum(axis=0)
        return grad_out @ self.params["weight"]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, training=False, rng=None):
        x = _as_batch(x)
        # subgradient at exactly 0 is 0
        mask = x > 0
        if training:
            self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, grad_out):
        return grad_out * self._require_cache()


class DropoutLayer(Layer):
    """Inverted dropout.

    The layer is stochastic when the stack runs in training mode or when
    ``active`` is set (Monte Carlo dropout at inference time).
    """

    kind = "dropout"

    def __init__(self, rate: float = 0.1):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = float(rate)
        self.active = False
        self.last_mask = None
        self._identity = False

    def spec(self):
        return {"type": self.kind, "rate": self.rate}

    def forward(self, x, training=False, rng=None):
        x = _as_batch(x)
        if not (training or self.active) or self.rate == 0.0:
            self.last_mask = None
            if training:
                self._cache = None
                self._identity = True
            return x
        if rng is None:
            raise StateError("stochastic dropout needs a random generator")
        keep = 1.0 - self.rate
        mask = rng.random(x.shape) < keep
        self.last_mask = mask
        scaled = mask / keep
        if training:
            self._cache = scaled
            self._identity = False
        return x * scaled

    def backward(self, grad_out):
        if self._identity:
            return grad_out
        return grad_out * self._require_cache()


class BatchNormLayer(Layer):
    """Batch normalization over the feature axis.

    Training mode normalizes with batch statistics and updates the running
    estimates; inference mode is a fixed affine map from running statistics.
    """

    kind = "batchnorm"

    def __init__(self, width: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.width = int(width)
        self.momentum = float(momentum)
        self.eps = float(eps)
        self.params["scale"] = np.ones(self.width, dtype=DTYPE)
        self.params["shift"] = np.zeros(self.width, dtype=DTYPE)
        self.buffers["running_mean"] = np.zeros(self.width, dtype=DTYPE)
        self.buffers["running_var"] = np.ones(self.width, dtype=DTYPE)

    def spec(self):
        return {"type": self.kind, "width": self.width, "momentum": self.momentum, "eps": self.eps}

    def forward(self, x, training=False, rng=None):
        x = _as_batch(x)
        if x.shape[1] != self.width:
            raise DimensionError(f"batchnorm expects width {self.width}, got {x.shape[1]}")
        if training:
            n = x.shape[0]
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            m = self.momentum
            unbiased = var * n / (n - 1) if n > 1 else var
            self.buffers["running_mean"] = (1 - m) * self.buffers["running_mean"] + m * mean
            self.buffers["running_var"] = (1 - m) * self.buffers["running_var"] + m * unbiased
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean) * inv_std
        if training:
            self._cache = (xhat, inv_std)
        return xhat * self.params["scale"] + self.params["shift"]

    def backward(self, grad_out):
        xhat, inv_std = self._require_cache()
        n = grad_out.shape[0]
        self.grads["scale"] = (grad_out * xhat).sum(axis=0)
        self.grads["shift"] = grad_out.sum(axis=0)
        g = grad_out * self.params["scale"]
        return inv_std / n * (n * g - g.sum(axis=0) - xhat * (g * xhat).sum(axis=0))


_LAYER_TYPES = {cls.kind: cls for cls in (DenseLayer, ReLU, DropoutLayer, BatchNormLayer)}


class LayerStack:
    """An ordered list of layers evaluated front to back."""

    def __init__(self, layers):
        self.layers = list(layers)

    def __len__(self):
        return len(self.layers)

    @property
    def in_width(self) -> int:
        for layer in self.layers:
            if isinstance(layer, DenseLayer):
                return layer.fan_in
            if isinstance(layer, BatchNormLayer):
                return layer.width
        raise DimensionError("stack has no layer with a declared width")

    def forward(self, x, training=False, rng=None, record=False):
        """Run the stack.

        With ``record=True`` a list of every layer's output is returned
        alongside the final activations.
        """
        x = _as_batch(x)
        outputs = []
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
            if record:
                outputs.append(x)
        return (x, outputs) if record else x

    def backward(self, grad_out):
        g = np.asarray(grad_out, dtype=DTYPE)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params.values()]

    def gradients(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            for name in layer.params:
                if name not in layer.grads:
                    raise StateError(f"{layer.kind}: no gradient for '{name}'; run backward first")
                out.append(layer.grads[name])
        return out

    def state_arrays(self) -> list[np.ndarray]:
        """Parameters and buffers in a fixed order (checkpoint payload)."""
        out = []
        for layer in self.layers:
            out.extend(layer.params.values())
            out.extend(layer.buffers.values())
        return out

    def set_dropout(self, active: bool):
        for layer in self.layers:
            if isinstance(layer, DropoutLayer):
                layer.active = bool(active)

    def spec(self) -> list[dict]:
        return [layer.spec() for layer in self.layers]

    @classmethod
    def from_spec(cls, spec) -> "LayerStack":
        layers = []
        for entry in spec:
            entry = dict(entry)
            kind = entry.pop("type")
            try:
                layer_cls = _LAYER_TYPES[kind]
            except KeyError:
                raise ValueError(f"unknown layer type {kind!r}") from None
            layers.append(layer_cls(**entry))
        return cls(layers)

    def copy(self) -> "LayerStack":
        clone = LayerStack.from_spec(self.spec())
        for dst, src in zip(clone.state_arrays(), self.state_arrays()):
            dst[...] = src
        return clone


class Adam:
    """Adam with decoupled weight decay.

    The decay is applied as a multiplicative shrink ``p *= 1 - lr * wd``
    before the usual bias-corrected Adam delta.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads):
        grads = list(grads)
        if len(grads) != len(self.params):
            raise DimensionError(f"{len(grads)} gradients for {len(self.params)} parameters")
        for i, g in enumerate(grads):
            if g.shape != self.params[i].shape:
                raise DimensionError(f"gradient {i} has shape {g.shape}, parameter {self.params[i].shape}")
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {i} at step {self.t + 1}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        shrink = 1.0 - self.lr * self.weight_decay
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if shrink != 1.0:
                p *= shrink
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


_MAGIC = b"MCNFCKPT1\n"


def save_checkpoint(path, stack: LayerStack, seed=None, meta=None):
    """Write a stack to ``path``.

    Layout: a magic line, one line of JSON header (layer plan, array
    shapes, seed, free-form meta), then every array as row-major
    little-endian float64.
    """
    arrays = stack.state_arrays()
    header = {
        "layers": stack.spec(),
        "shapes": [list(a.shape) for a in arrays],
        "seed": seed,
        "meta": meta or {},
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(stack, header)``."""
    with open(path, "rb") as fh:
        if fh.readline() != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        header = json.loads(fh.readline().decode("utf-8"))
        payload = fh.read()
    stack = LayerStack.from_spec(header["layers"])
    offset = 0
    for dst, shape in zip(stack.state_arrays(), header["shapes"]):
        if list(dst.shape) != shape:
            raise DimensionError(f"{path}: array shape {shape} does not match layer plan {dst.shape}")
        nbytes = dst.size * 8
        dst[...] = np.frombuffer(payload, dtype="<f8", count=dst.size, offset=offset).reshape(dst.shape)
        offset += nbytes
    if offset != len(payload):
        raise ValueError(f"{path}: {len(payload) - offset} trailing bytes")
    return stack, header
