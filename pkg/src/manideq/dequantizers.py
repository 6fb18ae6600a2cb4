"""Conditional dequantization densities over the auxiliary manifolds.

A small tanh perceptron maps the embedded manifold point y to the natural
parameters of a fixed family; sampling is a reparameterized transform of
standard normal noise, so gradients with respect to the conditioner weights
flow through the sample.

Families
--------
radial_lognormal           r > 0 (sphere)
product_radial_lognormal   r_1..r_m > 0 (torus)
triplus_gaussian           lower-triangular L, log-normal diagonal, normal
                           off-diagonal (Stiefel / orthogonal group)
interval_beta              u in [0, 1) (integers)
winding_categorical        k in {-K..K}^m (modulus dequantization)
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import autodiff as ad
from .flows import init_mlp, mlp
from .manifolds import tril_from_entries, tril_entries_of

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
SIGMA_MIN, SIGMA_MAX = 1e-3, 20.0
BETA_MIN, BETA_MAX = 1e-2, 1e3

FAMILIES = (
    "radial_lognormal",
    "product_radial_lognormal",
    "triplus_gaussian",
    "interval_beta",
    "winding_categorical",
)

_TINY = np.finfo(np.float64).tiny


class FamilyMismatch(ValueError):
    pass


class OutsideSupport(ValueError):
    pass


def softplus_inverse(y):
    return float(np.log(np.expm1(y)))


def _positive(raw, lo=SIGMA_MIN, hi=SIGMA_MAX):
    return ad.clip(ad.softplus(raw), lo, hi)


def _lognormal_logpdf(logr, mu, sigma):
    eps = (logr - mu) / sigma
    return -logr - ad.log(sigma) - HALF_LOG_2PI - 0.5 * eps * eps


def _normal_logpdf(v, mu, sigma):
    eps = (v - mu) / sigma
    return -ad.log(sigma) - HALF_LOG_2PI - 0.5 * eps * eps


# -- Beta inverse CDF with implicit reparameterization gradients ------------


def _beta_quantile(a, b, eps):
    return special.betaincinv(a, b, special.ndtr(eps))


def _beta_quantile_partials(a, b, u):
    # du/da = -(dI/da) / pdf(u), dI/da by central differences of betainc
    pdf = np.exp((a - 1) * np.log(u) + (b - 1) * np.log1p(-u) - special.betaln(a, b))
    ha = 1e-6 * np.maximum(1.0, a)
    hb = 1e-6 * np.maximum(1.0, b)
    dIa = (special.betainc(a + ha, b, u) - special.betainc(a - ha, b, u)) / (2 * ha)
    dIb = (special.betainc(a, b + hb, u) - special.betainc(a, b - hb, u)) / (2 * hb)
    return -dIa / pdf, -dIb / pdf


def _beta_quantile_vjp(g, out, a, b, eps):
    da, db = _beta_quantile_partials(a, b, out)
    return [g * da, g * db, None]


def _beta_quantile_jvp(t, out, a, b, eps):
    da, db = _beta_quantile_partials(a, b, out)
    res = 0.0
    if t[0] is not None:
        res = res + t[0] * da
    if t[1] is not None:
        res = res + t[1] * db
    return res


beta_quantile = ad.custom("beta_quantile", _beta_quantile, _beta_quantile_vjp, _beta_quantile_jvp)


@dataclass
class DequantizationDraw:
    z: np.ndarray
    log_q: np.ndarray
    noise: np.ndarray


@dataclass
class DequantizerParameters:
    """Conditioner weights (phi) plus the family they parameterize."""

    family: str
    in_dim: int
    aux_dim: int  # m for radii, p for Tri+, m for windings
    hidden_width: int = 32
    window: int = 3
    weights: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown dequantization family {self.family!r}")

    @property
    def n_params(self):
        return int(sum(w.size for w in self.weights.values()))

    @property
    def n_entries(self):
        """Number of scalar auxiliary coordinates."""
        if self.family == "radial_lognormal" or self.family == "interval_beta":
            return 1
        if self.family == "triplus_gaussian":
            return self.aux_dim * (self.aux_dim + 1) // 2
        return self.aux_dim

    @property
    def n_outputs(self):
        if self.family == "winding_categorical":
            return self.aux_dim * (2 * self.window + 1)
        return 2 * self.n_entries

    def architecture(self):
        return {
            "type": self.family,
            "in_dim": self.in_dim,
            "aux_dim": self.aux_dim,
            "hidden_width": self.hidden_width,
            "window": self.window,
        }

    def with_weights(self, weights):
        return DequantizerParameters(self.family, self.in_dim, self.aux_dim, self.hidden_width,
                                     self.window, {k: np.asarray(v) for k, v in weights.items()})

    def noise_shape(self, count, batch):
        if self.family == "triplus_gaussian" or self.family == "product_radial_lognormal":
            return (count, batch, self.n_entries)
        if self.family == "winding_categorical":
            return (count, batch, self.aux_dim, 2 * self.window + 1)
        return (count, batch)

    # -- conditioner ------------------------------------------------------

    def raw_outputs(self, features, weights=None):
        weights = self.weights if weights is None else weights
        return mlp(weights, "cond.", features)

    def natural_params(self, features, weights=None):
        raw = self.raw_outputs(features, weights)
        k = self.n_entries
        if self.family == "winding_categorical":
            logits = ad.reshape_last(raw, 1, (self.aux_dim, 2 * self.window + 1))
            return {"logits": logits}
        first = ad.getitem(raw, (Ellipsis, slice(0, k)))
        second = ad.getitem(raw, (Ellipsis, slice(k, 2 * k)))
        if self.family == "interval_beta":
            return {"alpha": _positive(first[..., 0], BETA_MIN, BETA_MAX),
                    "beta": _positive(second[..., 0], BETA_MIN, BETA_MAX)}
        if self.family == "radial_lognormal":
            first, second = first[..., 0], second[..., 0]
        return {"mu": first, "sigma": _positive(second)}

    # -- reparameterized sample with log density ---------------------------

    def transform(self, noise, features, weights=None):
        """z and log q(z | y) for base noise ``noise`` (shape from :meth:`noise_shape`)."""
        nat = self.natural_params(features, weights)
        fam = self.family
        if fam in ("radial_lognormal", "product_radial_lognormal"):
            logr = nat["mu"] + nat["sigma"] * noise
            logq = _lognormal_logpdf(logr, nat["mu"], nat["sigma"])
            if fam == "product_radial_lognormal":
                logq = ad.sum(logq, axis=-1)
            return ad.exp(logr), logq, logr
        if fam == "triplus_gaussian":
            p = self.aux_dim
            rows, cols = np.tril_indices(p)
            diag = (rows == cols).astype(np.float64)
            v = nat["mu"] + nat["sigma"] * noise
            entries = diag * ad.exp(v * diag) + (1.0 - diag) * v
            logq = ad.sum(
                _normal_logpdf(v, nat["mu"], nat["sigma"]) - diag * v, axis=-1
            )
            return tril_from_entries(entries, p), logq, v
        if fam == "interval_beta":
            a, b = nat["alpha"], nat["beta"]
            u = beta_quantile(a, b, noise)
            return u, self._beta_logpdf(u, a, b), u
        if fam == "winding_categorical":
            logp = nat["logits"] - ad.logsumexp(nat["logits"], axis=-1)[..., None]
            # Gumbel-max on the supplied noise; eager only, the draw is discrete
            if ad.is_symbolic(noise, nat["logits"]):
                raise ad.GraphError("winding draws cannot be traced; enumerate windings instead")
            g = -np.log(-np.log(special.ndtr(np.asarray(noise))))
            choice = np.argmax(np.asarray(nat["logits"]) + g, axis=-1)
            k = choice - self.window
            onehot = (choice[..., None] == np.arange(2 * self.window + 1)).astype(float)
            return k.astype(np.float64), ad.sum(ad.sum(logp * onehot, axis=-1), axis=-1), k
        raise AssertionError(fam)

    @staticmethod
    def _beta_logpdf(u, a, b):
        # u = 0 lies in the support; keep 0 * log 0 finite when a = 1
        u = ad.clip(u, _TINY, 1.0)
        return ((a - 1.0) * ad.log(u) + (b - 1.0) * ad.log(1.0 - u)
                - ad.gammaln(a) - ad.gammaln(b) + ad.gammaln(a + b))

    def log_prob(self, features, z, weights=None):
        """Exact log q(z | y), including change-of-variable terms."""
        nat = self.natural_params(features, weights)
        fam = self.family
        zv = np.asarray(z, dtype=np.float64) if not ad.is_symbolic(z) else z
        if fam in ("radial_lognormal", "product_radial_lognormal"):
            if not ad.is_symbolic(zv) and np.any(zv <= 0):
                raise OutsideSupport("radius must be positive")
            lp = _lognormal_logpdf(ad.log(zv), nat["mu"], nat["sigma"])
            return ad.sum(lp, axis=-1) if fam == "product_radial_lognormal" else lp
        if fam == "triplus_gaussian":
            p = self.aux_dim
            if not ad.is_symbolic(zv):
                if np.any(np.diagonal(zv, axis1=-2, axis2=-1) <= 0):
                    raise OutsideSupport("Tri+ needs a positive diagonal")
                if np.any(np.triu(zv, 1) != 0):
                    raise OutsideSupport("Tri+ matrices are lower triangular")
            rows, cols = np.tril_indices(p)
            diag = (rows == cols).astype(np.float64)
            e = tril_entries_of(zv, p)
            safe = diag * e + (1.0 - diag)
            v = diag * ad.log(safe) + (1.0 - diag) * e
            return ad.sum(_normal_logpdf(v, nat["mu"], nat["sigma"]) - diag * v, axis=-1)
        if fam == "interval_beta":
            if not ad.is_symbolic(zv) and np.any((zv < 0) | (zv >= 1)):
                raise OutsideSupport("u must lie in [0, 1)")
            return self._beta_logpdf(zv, nat["alpha"], nat["beta"])
        if fam == "winding_categorical":
            return self.winding_log_prob(features, zv, weights)
        raise AssertionError(fam)

    def winding_log_prob(self, features, k, weights=None):
        if self.family != "winding_categorical":
            raise FamilyMismatch("winding probabilities need the winding_categorical family")
        k = np.asarray(k)
        if np.any(np.abs(k) > self.window):
            raise OutsideSupport(f"winding index outside |k| <= {self.window}")
        logits = self.natural_params(features, weights)["logits"]
        logp = logits - ad.logsumexp(logits, axis=-1)[..., None]
        onehot = ((k[..., None] + self.window) == np.arange(2 * self.window + 1)).astype(float)
        return ad.sum(ad.sum(logp * onehot, axis=-1), axis=-1)

    def sample(self, features, rng, count=1):
        """``count`` draws per conditioning point (leading axis), with log q and noise."""
        features = np.asarray(features, dtype=np.float64)
        batch = features.shape[0]
        noise = rng.standard_normal(self.noise_shape(count, batch))
        z, logq, _ = self.transform(noise, features)
        return DequantizationDraw(np.asarray(z), np.asarray(logq), noise)


def dequantizer_init(family, in_dim, aux_dim=1, hidden_width=32, rng=None, window=3,
                     init_mu=0.0, init_sigma=0.5):
    """Conditioner with zero output layer: every y starts at the same (mu, sigma)."""
    rng = np.random.default_rng(0) if rng is None else rng
    params = DequantizerParameters(family, in_dim, aux_dim, hidden_width, window)
    weights = init_mlp(rng, "cond.", [in_dim, hidden_width, hidden_width, params.n_outputs])
    k = params.n_entries
    b = weights["cond.b3"]
    if family == "interval_beta":
        b[:] = softplus_inverse(1.0)
    elif family != "winding_categorical":
        b[:k] = init_mu
        b[k:] = softplus_inverse(init_sigma)
    params.weights = weights
    return params


def pinned(family, in_dim, aux_dim=1, window=3, **values):
    """Dequantizer whose output ignores y and equals the given natural parameters.

    ``pinned("radial_lognormal", 3, mu=0.0, sigma=1.0)``
    ``pinned("interval_beta", 1, alpha=1.0, beta=1.0)``
    """
    params = dequantizer_init(family, in_dim, aux_dim, hidden_width=2, window=window)
    b = params.weights["cond.b3"]
    k = params.n_entries
    if family == "interval_beta":
        b[0] = softplus_inverse(values.get("alpha", 1.0))
        b[1] = softplus_inverse(values.get("beta", 1.0))
    elif family == "winding_categorical":
        b[:] = np.asarray(values.get("logits", 0.0), dtype=float).ravel() * np.ones_like(b)
    else:
        b[:k] = values.get("mu", 0.0)
        b[k:] = softplus_inverse(values.get("sigma", 1.0))
    return params


def deq_sample(phi, features, rng, count=1):
    return phi.sample(features, rng, count)


def deq_log_prob(phi, features, z):
    return phi.log_prob(np.asarray(features, dtype=np.float64), z)


def winding_log_prob(phi, features, k):
    return phi.winding_log_prob(np.asarray(features, dtype=np.float64), k)
