"""Conditional rational-quadratic spline flow over a scalar.

Each flow layer is a monotone rational-quadratic spline on ``[-B, B]``
with identity (linear) tails. Its ``K`` bin widths, ``K`` bin heights and
``K - 1`` interior knot derivatives are produced per observation by a
small MLP (the conditioner) from a context vector. The base distribution
is a univariate Gaussian with trainable mean and log-scale.

All gradients are written out by hand: the spline's local reverse pass
works on one bin at a time and the results are scattered back through
the cumulative-sum, softmax and softplus constraints.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, StateError
from .numerics import DenseLayer, LayerStack, ReLU, load_checkpoint, save_checkpoint

MIN_BIN = 1e-3
MIN_DERIV = 1e-3
LOG_2PI = np.log(2.0 * np.pi)
_SAMPLE_ROWS = 100_000


def _softmax(a):
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softplus(a):
    return np.logaddexp(0.0, a)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def identity_raw(knots: int) -> np.ndarray:
    """Unconstrained parameters that make a spline the identity map."""
    raw = np.zeros(3 * knots - 1)
    # softplus(r) + MIN_DERIV == 1
    raw[2 * knots:] = np.log(np.expm1(1.0 - MIN_DERIV))
    return raw


class RqSpline:
    """A batch of rational-quadratic splines, one per row.

    widths, heights: (n, K) positive bin sizes, each row summing to 2B
    derivatives:     (n, K - 1) positive interior knot derivatives
    """

    def __init__(self, widths, heights, derivatives, tail_bound=5.0):
        self.widths = np.atleast_2d(np.asarray(widths, dtype=float))
        self.heights = np.atleast_2d(np.asarray(heights, dtype=float))
        inner = np.atleast_2d(np.asarray(derivatives, dtype=float))
        n, k = self.widths.shape
        if self.heights.shape != (n, k) or inner.shape != (n, k - 1):
            raise DimensionError("spline needs K widths, K heights and K-1 derivatives per row")
        if np.any(self.widths <= 0) or np.any(self.heights <= 0) or np.any(inner <= 0):
            raise ValueError("spline widths, heights and derivatives must be positive")
        self.tail_bound = float(tail_bound)
        B = self.tail_bound
        self.knot_x = self._knots(self.widths, B)
        self.knot_y = self._knots(self.heights, B)
        ones = np.ones((n, 1))
        self.derivs = np.concatenate([ones, inner, ones], axis=1)
        self._raw_cache = None

    @staticmethod
    def _knots(sizes, B):
        knots = np.concatenate([np.zeros((sizes.shape[0], 1)), np.cumsum(sizes, axis=1)], axis=1) - B
        knots[:, 0] = -B
        knots[:, -1] = B
        return knots

    @property
    def n_bins(self) -> int:
        return self.widths.shape[1]

    def __len__(self):
        return self.widths.shape[0]

    @classmethod
    def from_raw(cls, raw, knots, tail_bound=5.0) -> "RqSpline":
        """Map unconstrained parameters (n, 3K-1) to a valid spline batch."""
        raw = np.atleast_2d(np.asarray(raw, dtype=float))
        K = knots
        if raw.shape[1] != 3 * K - 1:
            raise DimensionError(f"expected {3 * K - 1} raw spline parameters, got {raw.shape[1]}")
        span = 2.0 * tail_bound
        sw = _softmax(raw[:, :K])
        sh = _softmax(raw[:, K:2 * K])
        widths = span * (MIN_BIN + (1.0 - MIN_BIN * K) * sw)
        heights = span * (MIN_BIN + (1.0 - MIN_BIN * K) * sh)
        inner = MIN_DERIV + _softplus(raw[:, 2 * K:])
        spline = cls(widths, heights, inner, tail_bound)
        spline._raw_cache = (sw, sh, raw[:, 2 * K:])
        return spline

    def repeat(self, count: int) -> "RqSpline":
        """Repeat every row ``count`` times (row-major), keeping raw caches."""
        out = RqSpline.__new__(RqSpline)
        out.tail_bound = self.tail_bound
        for name in ("widths", "heights", "knot_x", "knot_y", "derivs"):
            setattr(out, name, np.repeat(getattr(self, name), count, axis=0))
        out._raw_cache = None if self._raw_cache is None else tuple(
            np.repeat(a, count, axis=0) for a in self._raw_cache)
        return out

    # -- local evaluation -------------------------------------------------

    def _bin_params(self, knots, v):
        """Bin index and gathered local parameters for points ``v`` (one per row)."""
        K = self.n_bins
        idx = (v[:, None] >= knots[:, 1:K]).sum(axis=1)
        rows = np.arange(len(v))
        return idx, (
            self.knot_x[rows, idx], self.widths[rows, idx],
            self.knot_y[rows, idx], self.heights[rows, idx],
            self.derivs[rows, idx], self.derivs[rows, idx + 1],
        )

    @staticmethod
    def _local_forward(u, xk, w, yk, h, d0, d1):
        xi = (u - xk) / w
        s = h / w
        t = xi * (1.0 - xi)
        A = s * xi * xi + d0 * t
        den = s + (d0 + d1 - 2.0 * s) * t
        f = yk + h * A / den
        nd = d1 * xi * xi + 2.0 * s * t + d0 * (1.0 - xi) ** 2
        log_d = 2.0 * np.log(s) + np.log(nd) - 2.0 * np.log(den)
        return f, log_d, (xi, s, t, A, den, nd)

    @staticmethod
    def _local_backward(cache, w, h, d0, d1, af, al):
        """Reverse pass through ``f`` and ``log f'`` for one bin per row.

        ``af`` and ``al`` are the adjoints of ``f`` and ``log f'``. Returns
        adjoints of (u, knot_x, width, knot_y, height, d_left, d_right).
        """
        xi, s, t, A, den, nd = cache
        a_A = af * h / den
        a_den = -af * h * A / den**2 - 2.0 * al / den
        a_nd = al / nd
        a_s = 2.0 * al / s
        a_h = af * A / den
        a_yk = af
        a_xi = np.zeros_like(xi)
        a_t = np.zeros_like(xi)
        a_d0 = np.zeros_like(xi)
        a_d1 = np.zeros_like(xi)
        # A = s xi^2 + d0 t
        a_s += a_A * xi * xi
        a_xi += a_A * 2.0 * s * xi
        a_d0 += a_A * t
        a_t += a_A * d0
        # den = s + (d0 + d1 - 2s) t
        a_s += a_den * (1.0 - 2.0 * t)
        a_d0 += a_den * t
        a_d1 += a_den * t
        a_t += a_den * (d0 + d1 - 2.0 * s)
        # nd = d1 xi^2 + 2 s t + d0 (1 - xi)^2
        a_d1 += a_nd * xi * xi
        a_xi += a_nd * (2.0 * d1 * xi - 2.0 * d0 * (1.0 - xi))
        a_t += a_nd * 2.0 * s
        a_s += a_nd * 2.0 * t
        a_d0 += a_nd * (1.0 - xi) ** 2
        # t = xi (1 - xi)
        a_xi += a_t * (1.0 - 2.0 * xi)
        # s = h / w
        a_h += a_s / w
        a_w = -a_s * s / w
        # xi = (u - xk) / w
        a_u = a_xi / w
        a_xk = -a_xi / w
        a_w += -a_xi * xi / w
        return a_u, a_xk, a_w, a_yk, a_h, a_d0, a_d1

    # -- public maps ------------------------------------------------------

    def _broadcast(self, v):
        v = np.asarray(v, dtype=float)
        scalar = v.ndim == 0
        v = np.atleast_1d(v).ravel()
        spline = self
        if len(self) == 1 and len(v) > 1:
            spline = self.repeat(len(v))
        elif len(self) != len(v):
            raise DimensionError(f"{len(v)} points for {len(self)} splines")
        return spline, v, scalar

    def forward(self, z):
        """Map ``z`` forward; returns ``(x, log|dx/dz|)``."""
        spline, z, scalar = self._broadcast(z)
        x, log_d, _ = spline._forward_full(z)
        return (x[0], log_d[0]) if scalar else (x, log_d)

    def inverse(self, x):
        """Map ``x`` back; returns ``(z, log|dz/dx|)``."""
        spline, x, scalar = self._broadcast(x)
        z = spline._inverse_point(x)
        _, log_d, _ = spline._forward_full(z)
        return (z[0], -log_d[0]) if scalar else (z, -log_d)

    def _forward_full(self, z):
        B = self.tail_bound
        inside = (z >= -B) & (z <= B)
        x = z.copy()
        log_d = np.zeros_like(z)
        local = None
        if np.any(inside):
            zi = np.clip(z, -B, B)
            idx, params = self._bin_params(self.knot_x, zi)
            f, ld, cache = self._local_forward(zi, *params)
            x = np.where(inside, f, z)
            log_d = np.where(inside, ld, 0.0)
            local = (inside, idx, params, cache)
        return x, log_d, local

    def _inverse_point(self, x):
        B = self.tail_bound
        inside = (x >= -B) & (x <= B)
        xc = np.clip(x, -B, B)
        idx, (xk, w, yk, h, d0, d1) = self._bin_params(self.knot_y, xc)
        s = h / w
        dy = xc - yk
        c2 = d0 + d1 - 2.0 * s
        a = h * (s - d0) + dy * c2
        b = h * d0 - dy * c2
        c = -s * dy
        disc = np.maximum(b * b - 4.0 * a * c, 0.0)
        # numerically stable root inside the bin
        xi = np.clip(2.0 * c / (-b - np.sqrt(disc)), 0.0, 1.0)
        return np.where(inside, xi * w + xk, x)

    # -- gradients ------------------------------------------------------

    def scatter_local(self, local, a_xk, a_w, a_yk, a_h, a_d0, a_d1):
        """Accumulate per-bin adjoints into gradients of the raw parameters (n, 3K-1)."""
        if self._raw_cache is None:
            raise StateError("spline was not built from raw parameters")
        inside, idx, _, _ = local
        n, K = self.widths.shape
        rows = np.arange(n)
        m = inside.astype(float)
        a_X = np.zeros((n, K + 1))
        a_Y = np.zeros((n, K + 1))
        a_D = np.zeros((n, K + 1))
        a_X[rows, idx] += m * (a_xk - a_w)
        a_X[rows, idx + 1] += m * a_w
        a_Y[rows, idx] += m * (a_yk - a_h)
        a_Y[rows, idx + 1] += m * a_h
        a_D[rows, idx] += m * a_d0
        a_D[rows, idx + 1] += m * a_d1

        sw, sh, raw_d = self._raw_cache
        span = 2.0 * self.tail_bound
        scale = span * (1.0 - MIN_BIN * K)

        def through_softmax(a_knots, soft):
            # interior knot i depends on fractions 0..i-1 through a cumulative sum
            a_frac = np.zeros((n, K))
            a_frac[:, :K - 1] = np.cumsum(a_knots[:, 1:K][:, ::-1], axis=1)[:, ::-1]
            a_frac *= scale
            return soft * (a_frac - (a_frac * soft).sum(axis=1, keepdims=True))

        g_w = through_softmax(a_X, sw)
        g_h = through_softmax(a_Y, sh)
        g_d = a_D[:, 1:K] * _sigmoid(raw_d)
        return np.concatenate([g_w, g_h, g_d], axis=1)


def spline_forward(spline: RqSpline, z):
    return spline.forward(z)


def spline_inverse(spline: RqSpline, x):
    return spline.inverse(x)


def _conditioner(in_width, hidden, out_width, rng):
    stack = LayerStack([
        DenseLayer(in_width, hidden, rng), ReLU(),
        DenseLayer(hidden, hidden, rng), ReLU(),
        DenseLayer(hidden, out_width, rng),
    ])
    return stack


class ConditionalFlow:
    """Stack of conditional spline layers over a trainable Gaussian base.

    Sampling pushes base draws through the layers in order; density
    evaluation inverts them in reverse order.
    """

    def __init__(self, context_width, n_layers=2, knots=16, tail_bound=5.0, hidden=64, seed=0):
        self.context_width = int(context_width)
        self.n_layers = int(n_layers)
        self.knots = int(knots)
        self.tail_bound = float(tail_bound)
        self.hidden = int(hidden)
        rng = np.random.default_rng(seed)
        n_raw = 3 * self.knots - 1
        self.conditioners = []
        for _ in range(self.n_layers):
            cond = _conditioner(self.context_width, self.hidden, n_raw, rng)
            # start every layer at the identity map
            cond.layers[-1].params["weight"][...] = 0.0
            cond.layers[-1].params["bias"][...] = identity_raw(self.knots)
            self.conditioners.append(cond)
        self.base_mean = np.zeros(1)
        self.base_log_scale = np.zeros(1)

    # -- bookkeeping ----------------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        params = [p for cond in self.conditioners for p in cond.parameters()]
        return params + [self.base_mean, self.base_log_scale]

    def state_arrays(self) -> list[np.ndarray]:
        return self.parameters()

    def save(self, path, seed=None):
        """Checkpoint with all conditioner layers in one stack; base parameters go in the header."""
        stack = LayerStack([layer for cond in self.conditioners for layer in cond.layers])
        meta = {"context_width": self.context_width, "n_layers": self.n_layers, "knots": self.knots,
                "tail_bound": self.tail_bound, "hidden": self.hidden,
                "base_mean": float(self.base_mean[0]), "base_log_scale": float(self.base_log_scale[0])}
        save_checkpoint(path, stack, seed=seed, meta=meta)

    @classmethod
    def load(cls, path) -> "ConditionalFlow":
        stack, header = load_checkpoint(path)
        m = header["meta"]
        flow = cls(m["context_width"], m["n_layers"], m["knots"], m["tail_bound"], m["hidden"])
        per = len(stack) // flow.n_layers
        flow.conditioners = [LayerStack(stack.layers[i * per:(i + 1) * per]) for i in range(flow.n_layers)]
        flow.base_mean[0] = m["base_mean"]
        flow.base_log_scale[0] = m["base_log_scale"]
        return flow

    def _check_context(self, c):
        c = np.asarray(c, dtype=float)
        if c.ndim == 1:
            c = c[None, :]
        if c.shape[1] != self.context_width:
            raise DimensionError(f"context width {c.shape[1]} != configured {self.context_width}")
        return c

    def splines(self, c, training=False):
        c = self._check_context(c)
        return [RqSpline.from_raw(cond.forward(c, training=training), self.knots, self.tail_bound)
                for cond in self.conditioners]

    # -- density ----------------------------------------------------------

    def _base_log_prob(self, z):
        sigma = np.exp(self.base_log_scale[0])
        return -0.5 * LOG_2PI - self.base_log_scale[0] - 0.5 * ((z - self.base_mean[0]) / sigma) ** 2

    def log_prob(self, delta, c):
        """log p(delta | c); one context row per delta (or one shared row)."""
        delta = np.atleast_1d(np.asarray(delta, dtype=float))
        c = self._check_context(c)
        splines = self.splines(c)
        if len(c) == 1 and len(delta) > 1:
            splines = [s.repeat(len(delta)) for s in splines]
        elif len(c) != len(delta):
            raise DimensionError(f"{len(delta)} values for {len(c)} contexts")
        u = delta
        total = np.zeros_like(delta)
        for spline in reversed(splines):
            u, ld = spline.inverse(u)
            total += ld
        return self._base_log_prob(u) + total

    def log_prob_and_grad(self, delta, c, weights=None):
        """Weighted log-likelihood ``sum w_n log p(delta_n | c_n)`` and its gradients.

        Returns ``(log_probs, grads, grad_delta)`` where ``grads`` is aligned
        with :meth:`parameters`.
        """
        delta = np.asarray(delta, dtype=float).ravel()
        c = self._check_context(c)
        if len(c) != len(delta):
            raise DimensionError(f"{len(delta)} values for {len(c)} contexts")
        g = np.ones_like(delta) if weights is None else np.asarray(weights, dtype=float)
        splines = self.splines(c, training=True)

        # inverse pass, remembering each layer's input point
        evals = [None] * self.n_layers
        u = delta
        total = np.zeros_like(delta)
        for l in reversed(range(self.n_layers)):
            u = splines[l]._inverse_point(u)
            _, ld, local = splines[l]._forward_full(u)
            evals[l] = (ld, local)
            total -= ld
        mu, log_sigma = self.base_mean[0], self.base_log_scale[0]
        var = np.exp(2.0 * log_sigma)
        z = u
        log_probs = self._base_log_prob(z) + total

        grad_mu = np.sum(g * (z - mu) / var)
        grad_log_sigma = np.sum(g * (-1.0 + (z - mu) ** 2 / var))
        a_u = -g * (z - mu) / var

        raw_grads = []
        for l in range(self.n_layers):
            spline = splines[l]
            log_d, local = evals[l]
            deriv = np.exp(log_d)
            if local is None:
                raw_grads.append(np.zeros((len(delta), 3 * self.knots - 1)))
                a_u = a_u / deriv
                continue
            inside, idx, (xk, w, yk, h, d0, d1), cache = local
            zero = np.zeros_like(delta)
            one = np.ones_like(delta)
            dlogd_du = spline._local_backward(cache, w, h, d0, d1, zero, one)[0]
            a_total = a_u - g * np.where(inside, dlogd_du, 0.0)
            adj = spline._local_backward(cache, w, h, d0, d1, -a_total / deriv, -g)
            raw_grads.append(spline.scatter_local(local, *adj[1:]))
            a_u = a_total / deriv

        grads = []
        for cond, raw_g in zip(self.conditioners, raw_grads):
            cond.backward(raw_g)
            grads.extend(cond.gradients())
        grads += [np.array([grad_mu]), np.array([grad_log_sigma])]
        return log_probs, grads, a_u

    # -- sampling -------------------------------------------------------

    def sample(self, c, n, seed=None):
        """Draw ``n`` values per context row; returns ``(samples, log_probs)`` of shape (rows, n)."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        c = self._check_context(c)
        rows = len(c)
        samples = np.empty((rows, n))
        log_probs = np.empty((rows, n))
        # bounded memory: the repeated spline parameters are (rows * n, K) per layer
        step = max(1, _SAMPLE_ROWS // max(n, 1))
        for start in range(0, rows, step):
            part = slice(start, min(start + step, rows))
            splines = [s.repeat(n) for s in self.splines(c[part])]
            eps = rng.standard_normal(len(splines[0]))
            u = self.base_mean[0] + np.exp(self.base_log_scale[0]) * eps
            lp = self._base_log_prob(u)
            for spline in splines:
                u, ld = spline.forward(u)
                lp = lp - ld
            samples[part] = u.reshape(-1, n)
            log_probs[part] = lp.reshape(-1, n)
        return samples, log_probs


def flow_log_prob(flow: ConditionalFlow, delta, c):
    return flow.log_prob(delta, c)


def flow_sample(flow: ConditionalFlow, c, n, seed=None):
    return flow.sample(c, n, seed)
