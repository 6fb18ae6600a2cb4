"""Ambient Euclidean densities: a RealNVP-style affine coupling flow.

The flow maps base noise z ~ N(0, I) to x through alternating affine
coupling layers.  Each layer keeps the masked coordinates fixed and applies
``x_active * exp(s) + t`` to the rest, with (s, t) produced by one tanh
perceptron (two hidden layers, separate scale and shift output heads) that
reads only the fixed coordinates.  The scale head is squashed to
``cap * tanh(.)``.  Output heads start at zero, so a fresh flow is the
identity and its density is the standard normal.

Densities accept events of shape ``event_shape`` (a vector or a matrix) with
arbitrary leading batch axes; matrix events are flattened row-major.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

LOG_2PI = np.log(2.0 * np.pi)


def _flatten_event(x, event_shape):
    if len(event_shape) == 1:
        return x
    return ad.reshape_last(x, len(event_shape), (int(np.prod(event_shape)),))


def _unflatten_event(x, event_shape):
    if len(event_shape) == 1:
        return x
    return ad.reshape_last(x, 1, tuple(event_shape))


def mlp(weights, prefix, x, n_layers=3):
    """tanh perceptron; weights named ``{prefix}W{i}`` / ``{prefix}b{i}``."""
    h = x
    for i in range(1, n_layers + 1):
        h = h @ weights[f"{prefix}W{i}"] + weights[f"{prefix}b{i}"]
        if i < n_layers:
            h = ad.tanh(h)
    return h


def init_mlp(rng, prefix, sizes, zero_last=True):
    weights = {}
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:]), start=1):
        last = i == len(sizes) - 1
        if last and zero_last:
            W = np.zeros((fan_in, fan_out))
        else:
            W = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
        weights[f"{prefix}W{i}"] = W
        weights[f"{prefix}b{i}"] = np.zeros(fan_out)
    return weights


def alternating_masks(m, n_layers):
    """Even/odd binary masks (1 = kept fixed), alternating layer to layer."""
    even = (np.arange(m) % 2 == 0).astype(np.float64)
    return [even if k % 2 == 0 else 1.0 - even for k in range(n_layers)]


@dataclass
class FlowParameters:
    """Affine coupling flow parameters (the ambient parameters theta)."""

    event_shape: tuple
    n_layers: int
    hidden_width: int
    scale_cap: float
    weights: dict = field(repr=False)

    @property
    def dim(self):
        return int(np.prod(self.event_shape))

    @property
    def masks(self):
        return alternating_masks(self.dim, self.n_layers)

    @property
    def n_params(self):
        return int(sum(w.size for w in self.weights.values()))

    def architecture(self):
        return {
            "type": "realnvp",
            "event_shape": list(self.event_shape),
            "n_layers": self.n_layers,
            "hidden_width": self.hidden_width,
            "scale_cap": self.scale_cap,
        }

    def with_weights(self, weights):
        return FlowParameters(self.event_shape, self.n_layers, self.hidden_width,
                              self.scale_cap, {k: np.asarray(v) for k, v in weights.items()})

    # -- per-layer maps ---------------------------------------------------

    def _conditioner(self, k, xm, weights):
        out = mlp(weights, f"layer{k}.", xm)
        d = self.dim
        s = self.scale_cap * ad.tanh(ad.getitem(out, (Ellipsis, slice(0, d))))
        t = ad.getitem(out, (Ellipsis, slice(d, 2 * d)))
        return s, t

    def coupling_forward(self, k, x, weights=None):
        weights = self.weights if weights is None else weights
        mask = self.masks[k]
        active = 1.0 - mask
        s, t = self._conditioner(k, x * mask, weights)
        s = s * active
        y = x * ad.exp(s) + t * active
        return y, ad.sum(s, axis=-1)

    def coupling_inverse(self, k, y, weights=None):
        weights = self.weights if weights is None else weights
        mask = self.masks[k]
        active = 1.0 - mask
        s, t = self._conditioner(k, y * mask, weights)
        s = s * active
        x = (y - t * active) * ad.exp(-s)
        return x, -ad.sum(s, axis=-1)

    # -- densities --------------------------------------------------------

    def inverse(self, x, weights=None):
        """Base-space preimage and summed inverse log-determinant."""
        z = _flatten_event(x, self.event_shape)
        total = 0.0
        for k in reversed(range(self.n_layers)):
            z, ld = self.coupling_inverse(k, z, weights)
            total = total + ld
        return z, total

    def forward(self, z, weights=None):
        x = z
        total = 0.0
        for k in range(self.n_layers):
            x, ld = self.coupling_forward(k, x, weights)
            total = total + ld
        return _unflatten_event(x, self.event_shape), total

    def log_prob(self, x, weights=None):
        z, ld = self.inverse(x, weights)
        base = -0.5 * ad.sum(z * z, axis=-1) - 0.5 * self.dim * LOG_2PI
        return base + ld

    def sample(self, rng, count):
        """``count`` draws with their exact log densities."""
        z = rng.standard_normal((count, self.dim))
        base = -0.5 * np.sum(z * z, axis=-1) - 0.5 * self.dim * LOG_2PI
        x, ld = self.forward(z)
        return x, base - ld


@dataclass
class StandardNormal:
    """Fixed N(0, I) ambient density with no parameters."""

    event_shape: tuple
    weights: dict = field(default_factory=dict, repr=False)

    @property
    def dim(self):
        return int(np.prod(self.event_shape)) if self.event_shape else 1

    @property
    def n_params(self):
        return 0

    def architecture(self):
        return {"type": "standard_normal", "event_shape": list(self.event_shape)}

    def with_weights(self, weights):
        return self

    def log_prob(self, x, weights=None):
        if not self.event_shape:
            return -0.5 * x * x - 0.5 * LOG_2PI
        z = _flatten_event(x, self.event_shape)
        return -0.5 * ad.sum(z * z, axis=-1) - 0.5 * self.dim * LOG_2PI

    def sample(self, rng, count):
        shape = (count,) + tuple(self.event_shape)
        x = rng.standard_normal(shape)
        return x, self.log_prob(x)


def flow_init(event_shape, n_layers=4, hidden_width=32, rng=None, scale_cap=3.0):
    """Fresh coupling flow; every output head is zero so the flow starts at the identity."""
    if isinstance(event_shape, int):
        event_shape = (event_shape,)
    event_shape = tuple(int(e) for e in event_shape)
    m = int(np.prod(event_shape))
    if m < 2:
        raise ValueError("coupling flows need at least two ambient dimensions")
    if n_layers < 2:
        raise ValueError("need at least two coupling layers")
    rng = np.random.default_rng(0) if rng is None else rng
    weights = {}
    for k in range(n_layers):
        weights.update(init_mlp(rng, f"layer{k}.", [m, hidden_width, hidden_width, 2 * m]))
    return FlowParameters(event_shape, n_layers, hidden_width, float(scale_cap), weights)


def flow_log_prob(theta, x):
    return theta.log_prob(np.asarray(x, dtype=np.float64))


def flow_sample(theta, rng, count):
    return theta.sample(rng, count)
