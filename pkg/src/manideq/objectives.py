"""Importance weights, the two training objectives and the marginal density estimator.

A :class:`DequantizedModel` bundles an ambient density theta on R^m, a
dequantizer phi over the auxiliary coordinates and the manifold they
quantize to.  :func:`log_weights` is written once with polymorphic
operations, so the same code is traced into a graph for gradients and run
eagerly on numpy arrays for evaluation.

Weight shapes (leading axes):

    radial methods      (K, B)
    SO(n)               (K, 2, B), middle axis enumerates {Id, R}
    modulus             (W, B), W = (2 K_w + 1)^m windings enumerated exactly
"""

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp as np_logsumexp

from . import autodiff as ad
from .manifolds import (
    Integer,
    Sphere,
    SpecialOrthogonal,
    Stiefel,
    Torus,
    TWO_PI,
    cholesky_polar_join,
    default_reflection,
    sphere_join,
    sphere_log_density_factor,
    torus_angles,
    torus_join,
    torus_log_density_factor,
    stiefel_log_density_factor,
)

LOG2 = np.log(2.0)
OBJECTIVES = ("elbo", "iwll")


class ObjectiveError(ValueError):
    pass


@dataclass
class DequantizedModel:
    """Ambient density, dequantizer and the manifold they target.

    ``method`` is ``"radial"`` for the product-coordinate maps (sphere radius,
    torus radii, Cholesky polar factor, integer offset) and ``"modulus"`` for
    angles dequantized by winding numbers.
    """

    manifold: object
    theta: object
    phi: object
    method: str = "radial"
    reflection: np.ndarray = None

    def __post_init__(self):
        if self.method not in ("radial", "modulus"):
            raise ObjectiveError(f"unknown dequantization method {self.method!r}")
        expected = expected_family(self.manifold, self.method)
        if self.phi.family != expected:
            raise ObjectiveError(
                f"{type(self.manifold).__name__} with method {self.method!r} "
                f"needs a {expected} dequantizer, got {self.phi.family}"
            )
        if isinstance(self.manifold, SpecialOrthogonal) and self.reflection is None:
            self.reflection = default_reflection(self.manifold.n)

    @property
    def is_special_orthogonal(self):
        return isinstance(self.manifold, SpecialOrthogonal)

    def with_weights(self, theta_w, phi_w):
        return DequantizedModel(self.manifold, self.theta.with_weights(theta_w),
                                self.phi.with_weights(phi_w), self.method, self.reflection)

    def n_params(self):
        return self.theta.n_params + self.phi.n_params

    def features(self, y):
        """Embedding coordinates fed to the conditioner."""
        man = self.manifold
        if isinstance(man, Stiefel):
            return ad.reshape_last(y, 2, (man.n * man.p,))
        if isinstance(man, Integer):
            return y[..., None]
        if self.method == "modulus":
            pairs = ad.stack([ad.cos(y), ad.sin(y)], axis=-1)
            return ad.reshape_last(pairs, 2, (2 * man.m,))
        return y

    def noise_shape(self, n_mc, batch):
        shape = self.phi.noise_shape(n_mc, batch)
        if self.is_special_orthogonal:
            shape = shape[:1] + (2,) + shape[1:]
        return shape

    def windings(self):
        m = self.manifold.m
        w = self.phi.window
        return np.array(list(itertools.product(range(-w, w + 1), repeat=m)), dtype=np.float64)


def expected_family(manifold, method):
    if method == "modulus":
        if not isinstance(manifold, Torus):
            raise ObjectiveError("modulus dequantization is defined for angles (torus)")
        return "winding_categorical"
    if isinstance(manifold, Sphere):
        return "radial_lognormal"
    if isinstance(manifold, Torus):
        return "product_radial_lognormal"
    if isinstance(manifold, Stiefel):
        return "triplus_gaussian"
    if isinstance(manifold, Integer):
        return "interval_beta"
    raise ObjectiveError(f"unsupported manifold {manifold!r}")


def model_inputs(model, y):
    """Data in the coordinates :func:`log_weights` expects (angles for modulus)."""
    y = np.asarray(y, dtype=np.float64)
    if model.method == "modulus":
        return torus_angles(y)
    return y


def log_weights(model, y, noise, theta_w=None, phi_w=None):
    """log pi_X(x) + log Gram factor - log q(z | y), with z the transform of ``noise``.

    Returns ``(log_w, log_q)``.  For the modulus method ``noise`` is ignored and
    every winding in the window is enumerated.
    """
    man, theta, phi = model.manifold, model.theta, model.phi
    if model.method == "modulus":
        k = model.windings()  # (W, m)
        x = y + TWO_PI * k[:, None, :]
        logits = phi.natural_params(model.features(y), phi_w)["logits"]  # (B, m, J)
        logp = logits - ad.logsumexp(logits, axis=-1)[..., None]
        onehot = (k[..., None] + phi.window == np.arange(2 * phi.window + 1)).astype(np.float64)
        logq = ad.sum(ad.sum(logp * onehot[:, None], axis=-1), axis=-1)  # (W, B)
        return theta.log_prob(x, theta_w) - logq, logq

    if model.is_special_orthogonal:
        # both cells of O(n): O and R O
        y = ad.stack([y, model.reflection @ y], axis=0)

    z, logq, _ = phi.transform(noise, model.features(y), phi_w)
    if isinstance(man, Sphere):
        x = sphere_join(y, z)
        factor = sphere_log_density_factor(z, man.m)
    elif isinstance(man, Torus):
        x = torus_join(y, z, man.m)
        factor = torus_log_density_factor(z)
    elif isinstance(man, Stiefel):
        x = cholesky_polar_join(y, z)
        factor = stiefel_log_density_factor(z, man.n, man.p)
    elif isinstance(man, Integer):
        x = y + z
        factor = 0.0
    else:
        raise ObjectiveError(f"unsupported manifold {man!r}")
    return theta.log_prob(x, theta_w) + factor - logq, logq


def log_weight(model, y, draw):
    """Single-draw log importance weight (eager); ``draw`` from :meth:`DequantizerParameters.sample`."""
    y = np.asarray(y, dtype=np.float64)
    return log_weights(model, y, draw.noise)[0]


# -- per-datum objective values ---------------------------------------------


def per_datum(model, kind, log_w, log_q=None, n_mc=None):
    """Per-datum objective from a weight array (polymorphic).

    ``n_mc`` is required when ``log_w`` is symbolic.
    """
    if kind not in OBJECTIVES:
        raise ObjectiveError(f"unknown objective {kind!r}")
    if model.method == "modulus":
        if kind == "elbo":
            return ad.sum(ad.exp(log_q) * log_w, axis=0)
        return ad.logsumexp(log_w + log_q, axis=0)
    if n_mc is None:
        n_mc = np.shape(log_w)[0]
    if kind == "elbo":
        # for SO(n) this is 1/2 sum over {Id, R} of the MC mean, log 2 dropped
        out = ad.mean(log_w, axis=0)
        return ad.mean(out, axis=0) if model.is_special_orthogonal else out
    if model.is_special_orthogonal:
        flat = ad.reshape_last(ad.swapaxes(log_w, 0, 2), 2, (2 * n_mc,))
    else:
        flat = ad.swapaxes(log_w, 0, -1)
    return ad.logsumexp(flat, axis=-1) - np.log(n_mc)


# -- compiled objectives ------------------------------------------------------


class CompiledObjective:
    """Traced graph of the batch objective for fixed (kind, n_mc, batch shape).

    Inputs: ``theta/<name>``, ``phi/<name>``, ``y``, ``noise``.
    Outputs: ``objective`` (batch mean), ``per_datum``, ``log_w``.
    """

    def __init__(self, model, kind, n_mc, y_shape):
        if n_mc < 1:
            raise ObjectiveError("n_mc must be >= 1")
        self.kind = kind
        self.n_mc = n_mc
        self.theta_names = [f"theta/{k}" for k in model.theta.weights]
        self.phi_names = [f"phi/{k}" for k in model.phi.weights]
        self.y_shape = tuple(y_shape)
        names = self.theta_names + self.phi_names + ["y", "noise"]
        nt = len(self.theta_names)
        template = model

        def fn(*args):
            tw = dict(zip(template.theta.weights, args[:nt]))
            pw = dict(zip(template.phi.weights, args[nt:-2]))
            y, noise = args[-2], args[-1]
            log_w, log_q = log_weights(template, y, noise, tw, pw)
            per = per_datum(template, kind, log_w, log_q, n_mc)
            return {"objective": ad.mean(per), "per_datum": per, "log_w": log_w}

        self.graph = ad.trace(fn, names)
        self.wrt = self.theta_names + self.phi_names

    def bindings(self, model, y, noise):
        b = {f"theta/{k}": v for k, v in model.theta.weights.items()}
        b.update({f"phi/{k}": v for k, v in model.phi.weights.items()})
        b["y"] = y
        b["noise"] = noise
        return b

    def value_and_grad(self, model, y, noise):
        vals, grads = ad.value_and_gradient(self.graph, self.bindings(model, y, noise), self.wrt,
                                            output="objective")
        theta_g = {n.split("/", 1)[1]: grads[n] for n in self.theta_names}
        phi_g = {n.split("/", 1)[1]: grads[n] for n in self.phi_names}
        return vals, {"theta": theta_g, "phi": phi_g}

    def value(self, model, y, noise):
        return ad.evaluate(self.graph, self.bindings(model, y, noise))


_CACHE = {}


def compiled(model, kind, n_mc, y_shape):
    key = (id(model.theta.__class__), model.theta.architecture().__repr__(),
           repr(model.phi.architecture()), repr(model.manifold), model.method,
           None if model.reflection is None else model.reflection.tobytes(),
           kind, n_mc, tuple(y_shape))
    obj = _CACHE.get(key)
    if obj is None:
        obj = CompiledObjective(model, kind, n_mc, y_shape)
        _CACHE[key] = obj
    return obj


def draw_noise(model, n_mc, batch, rng):
    if model.method == "modulus":
        return np.zeros((1,))
    return rng.standard_normal(model.noise_shape(n_mc, batch))


def objective(model, kind, batch, n_mc, rng=None, noise=None):
    """(value, gradients) of the batch-mean objective; ``noise`` overrides ``rng`` draws."""
    y = model_inputs(model, batch)
    if noise is None:
        noise = draw_noise(model, n_mc, y.shape[0], rng)
    obj = compiled(model, kind, n_mc, y.shape)
    vals, grads = obj.value_and_grad(model, y, noise)
    value = float(vals["objective"])
    if not np.isfinite(value):
        raise ad.NonFiniteError(-1, kind)
    return value, grads


def elbo(model, batch, n_mc, rng=None, noise=None):
    """Jensen lower bound: mean over data and draws of the log weight."""
    return objective(model, "elbo", batch, n_mc, rng, noise)


def iwll(model, batch, n_mc, rng=None, noise=None):
    """Importance-sampled log-likelihood: mean over data of log mean_k w_k."""
    return objective(model, "iwll", batch, n_mc, rng, noise)


def son_elbo(model, batch, n_mc, rng=None, noise=None):
    """Lower bound on SO(n) log densities with exact enumeration over {Id, R}.

    The additive log 2 is omitted; see :func:`marginal_log_density` for the
    reported densities.
    """
    if not model.is_special_orthogonal:
        raise ObjectiveError("son_elbo needs a SpecialOrthogonal model")
    return objective(model, "elbo", batch, n_mc, rng, noise)


def per_datum_values(model, kind, batch, n_mc, rng=None, noise=None):
    """Eager per-datum objective values (used for the Jensen-gap checks)."""
    y = model_inputs(model, batch)
    if noise is None:
        noise = draw_noise(model, n_mc, y.shape[0], rng)
    log_w, log_q = log_weights(model, y, noise)
    return per_datum(model, kind, log_w, log_q, n_mc)


# -- marginal density ---------------------------------------------------------


def marginal_log_density(model, y, K, rng, chunk=50_000):
    """Importance-sampling estimate of log pi_Y(y) with K draws per point.

    ``y`` is one point or a batch in embedding coordinates.  For SO(n) the two
    cells are summed, so the value estimates log[pi_O(O) + pi_O(R O)].  The
    modulus method enumerates windings and is exact up to the window.
    """
    if K < 1:
        raise ObjectiveError("K must be >= 1")
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == len(model.manifold.point_shape)
    y = model_inputs(model, y[None] if single else y)
    B = y.shape[0]
    out = np.empty(B)
    if model.method == "modulus":
        step = max(1, chunk // len(model.windings()))
        for b0 in range(0, B, step):
            log_w, log_q = log_weights(model, y[b0:b0 + step], None)
            out[b0:b0 + step] = np_logsumexp(log_w + log_q, axis=0)
        return out[0] if single else out

    cells = 2 if model.is_special_orthogonal else 1
    bc = max(1, min(B, chunk // cells))
    kc = max(1, min(K, chunk // (bc * cells)))
    for b0 in range(0, B, bc):
        yb = y[b0:b0 + bc]
        acc = np.full(yb.shape[0], -np.inf)
        for k0 in range(0, K, kc):
            noise = rng.standard_normal(model.noise_shape(min(kc, K - k0), yb.shape[0]))
            log_w = log_weights(model, yb, noise)[0]
            log_w = log_w.reshape((-1, yb.shape[0]))
            acc = np.logaddexp(acc, np_logsumexp(log_w, axis=0))
        out[b0:b0 + bc] = acc - np.log(K)
    return out[0] if single else out


# -- sampling the quantized model -----------------------------------------------


def sample_manifold(model, count, rng):
    """Draw x from the ambient density and quantize it to the manifold.

    SO(n) draws land on O(n) and are folded onto SO(n) through the reflection.
    Returned points use embedding coordinates (Clifford coordinates for angles).
    """
    man = model.manifold
    x, _ = model.theta.sample(rng, count)
    x = np.asarray(x, dtype=np.float64)
    if model.method == "modulus":
        theta = np.mod(x.reshape(count, man.m), TWO_PI)
        pairs = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
        return pairs.reshape(count, 2 * man.m)
    if isinstance(man, Sphere):
        return x / np.linalg.norm(x, axis=-1, keepdims=True)
    if isinstance(man, Torus):
        pairs = x.reshape(count, man.m, 2)
        return (pairs / np.linalg.norm(pairs, axis=-1, keepdims=True)).reshape(count, 2 * man.m)
    if isinstance(man, Stiefel):
        M = x.reshape(count, man.n, man.p)
        U, _, Vt = np.linalg.svd(M, full_matrices=False)
        O = U @ Vt
        if model.is_special_orthogonal:
            flip = np.linalg.det(O) < 0
            O[flip] = model.reflection @ O[flip]
        return O
    if isinstance(man, Integer):
        return np.floor(x)
    raise ObjectiveError(f"unsupported manifold {man!r}")
