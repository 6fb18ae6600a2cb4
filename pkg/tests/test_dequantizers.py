import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, special

from manideq import autodiff as ad
from manideq.dequantizers import (
    FAMILIES,
    FamilyMismatch,
    OutsideSupport,
    deq_log_prob,
    deq_sample,
    dequantizer_init,
    pinned,
    winding_log_prob,
)

Y3 = np.array([[0.0, 0.0, 1.0]])


def test_radial_examples():
    phi = pinned("radial_lognormal", 3, mu=0.0, sigma=1.0)
    z, logq, _ = phi.transform(np.zeros((1, 1)), Y3)
    assert z[0, 0] == 1.0
    assert np.isclose(logq[0, 0], -0.5 * np.log(2 * np.pi))
    assert np.isclose(deq_log_prob(phi, Y3, np.array([1.0])), -0.9189385, atol=1e-7)


def test_radial_log_moment():
    phi = pinned("radial_lognormal", 3, mu=0.4, sigma=0.7)
    n = 100_000
    d = deq_sample(phi, Y3, np.random.default_rng(0), n)
    assert abs(np.log(d.z).mean() - 0.4) < 3 * 0.7 / np.sqrt(n)
    assert np.allclose(deq_log_prob(phi, Y3, d.z[:100]), d.log_q[:100], atol=1e-12)


def test_interval_beta_uniform():
    phi = pinned("interval_beta", 1, alpha=1.0, beta=1.0)
    u = np.linspace(0, 1, 50, endpoint=False)
    assert np.allclose(deq_log_prob(phi, np.zeros((50, 1)), u), 0.0, atol=1e-12)


def test_triplus_reduces_to_radial():
    phi = pinned("triplus_gaussian", 1, aux_dim=1, mu=0.0, sigma=1.0)
    assert np.isclose(deq_log_prob(phi, np.zeros((1, 1)), np.ones((1, 1, 1))), -0.9189385, atol=1e-7)


def test_winding_window():
    phi = pinned("winding_categorical", 2, aux_dim=1, window=3)
    for k in range(-3, 4):
        assert np.isclose(winding_log_prob(phi, np.zeros((1, 2)), np.array([[k]])), -np.log(7))
    phi0 = pinned("winding_categorical", 2, aux_dim=1, window=0)
    assert winding_log_prob(phi0, np.zeros((1, 2)), np.array([[0]])) == 0.0
    with pytest.raises(OutsideSupport):
        winding_log_prob(phi, np.zeros((1, 2)), np.array([[4]]))


def test_winding_mismatch():
    with pytest.raises(FamilyMismatch):
        winding_log_prob(pinned("radial_lognormal", 3), Y3, np.array([0]))


def test_wrapped_normal_by_winding_importance_sampling():
    # exact expectation over the categorical recovers the truncated wrapped sum
    window = 10
    phi = dequantizer_init("winding_categorical", 2, 1, 8, np.random.default_rng(0), window=window)
    phi.weights["cond.b3"][:] = np.random.default_rng(1).standard_normal(2 * window + 1)
    y = 1.3
    feats = np.array([[np.cos(y), np.sin(y)]])
    ks = np.arange(-window, window + 1)
    logq = np.array([winding_log_prob(phi, feats, np.array([[k]]))[0] for k in ks])
    logw = -0.5 * (y + 2 * np.pi * ks) ** 2 - 0.5 * np.log(2 * np.pi) - logq
    est = np.sum(np.exp(logq + logw))
    oracle = np.sum(np.exp(-0.5 * (y + 2 * np.pi * ks) ** 2)) / np.sqrt(2 * np.pi)
    assert abs(est - oracle) < 1e-6
    d = deq_sample(phi, feats, np.random.default_rng(2), 20_000)
    freq = np.mean(d.z[:, 0, 0] == 0)
    assert abs(freq - np.exp(logq[window])) < 0.02


def test_radial_quadrature_normalisation():
    phi = pinned("radial_lognormal", 3, mu=0.3, sigma=0.8)
    x, w = np.polynomial.legendre.leggauss(200)
    t = 0.3 + 12 * x  # log r
    r = np.exp(t)
    dens = np.exp(deq_log_prob(phi, np.repeat(Y3, len(r), 0), r)) * r * 12
    assert abs(np.sum(w * dens) - 1) < 1e-6


def test_product_radial_quadrature_normalisation():
    phi = pinned("product_radial_lognormal", 4, aux_dim=2, mu=0.2, sigma=0.6)
    x, w = np.polynomial.legendre.leggauss(80)
    t = 0.2 + 6 * x
    T1, T2 = np.meshgrid(t, t, indexing="ij")
    r = np.exp(np.stack([T1.ravel(), T2.ravel()], -1))
    lp = deq_log_prob(phi, np.zeros((len(r), 4)), r)
    total = np.sum(np.outer(w, w).ravel() * np.exp(lp) * np.prod(r, -1) * 36)
    assert abs(total - 1) < 1e-5


def test_triplus_quadrature_normalisation():
    phi = pinned("triplus_gaussian", 4, aux_dim=2, mu=0.1, sigma=0.5)
    x, w = np.polynomial.legendre.leggauss(40)
    a = 0.1 + 4 * x
    A, B, C = np.meshgrid(a, a, a, indexing="ij")
    L = np.zeros(A.shape + (2, 2))
    L[..., 0, 0], L[..., 1, 0], L[..., 1, 1] = np.exp(A), B, np.exp(C)
    L = L.reshape(-1, 2, 2)
    lp = deq_log_prob(phi, np.zeros((len(L), 4)), L)
    jac = L[:, 0, 0] * L[:, 1, 1] * 4**3
    W = (w[:, None, None] * w[None, :, None] * w[None, None, :]).ravel()
    assert abs(np.sum(W * np.exp(lp) * jac) - 1) < 1e-5


def test_beta_quadrature_normalisation():
    phi = pinned("interval_beta", 1, alpha=2.5, beta=0.7)
    val, _ = integrate.quad(lambda u: np.exp(deq_log_prob(phi, np.zeros((1, 1)), np.array([u]))[0]),
                            0, 1, limit=200)
    assert abs(val - 1) < 1e-5


@pytest.mark.parametrize("family", ["radial_lognormal", "interval_beta", "triplus_gaussian"])
def test_non_vanishing_near_boundary(family):
    phi = dequantizer_init(family, 1, 1, 8, np.random.default_rng(0))
    f = np.zeros((1, 1))
    if family == "interval_beta":
        zs = [np.array([1e-8]), np.array([1 - 1e-8])]
    elif family == "radial_lognormal":
        zs = [np.array([1e-8]), np.array([1e8])]
    else:
        zs = [np.full((1, 1, 1), 1e-8)]
    for z in zs:
        assert np.all(np.isfinite(deq_log_prob(phi, f, z)))


def test_outside_support():
    with pytest.raises(OutsideSupport):
        deq_log_prob(pinned("radial_lognormal", 3), Y3, np.array([0.0]))
    with pytest.raises(OutsideSupport):
        deq_log_prob(pinned("interval_beta", 1), np.zeros((1, 1)), np.array([1.0]))
    with pytest.raises(OutsideSupport):
        deq_log_prob(pinned("triplus_gaussian", 4, aux_dim=2), np.zeros((1, 4)),
                     np.array([[[1.0, 0.0], [0.0, -1.0]]]))
    with pytest.raises(OutsideSupport):
        deq_log_prob(pinned("triplus_gaussian", 4, aux_dim=2), np.zeros((1, 4)),
                     np.array([[[1.0, 0.5], [0.0, 1.0]]]))


def test_unknown_family():
    with pytest.raises(ValueError):
        dequantizer_init("flow", 3)


@pytest.mark.parametrize("family,in_dim,aux", [
    ("radial_lognormal", 3, 1), ("product_radial_lognormal", 4, 2),
    ("triplus_gaussian", 9, 3), ("interval_beta", 1, 1),
])
def test_sample_matches_log_prob(family, in_dim, aux):
    r = np.random.default_rng(5)
    phi = dequantizer_init(family, in_dim, aux, 8, r)
    phi = phi.with_weights({k: v + 0.3 * r.standard_normal(v.shape) for k, v in phi.weights.items()})
    feats = r.standard_normal((6, in_dim))
    d = deq_sample(phi, feats, r, 4)
    for c in range(4):
        assert np.allclose(deq_log_prob(phi, feats, d.z[c]), d.log_q[c], atol=1e-9)


@given(st.floats(0.2, 5.0), st.floats(0.2, 5.0), st.floats(-3, 3))
def test_sigma_positive_and_beta_in_range(a, b, eps):
    phi = pinned("interval_beta", 1, alpha=a, beta=b)
    u, logq, _ = phi.transform(np.array([[eps]]), np.zeros((1, 1)))
    assert 0 <= u[0, 0] < 1 and np.isfinite(logq[0, 0])
    assert np.isclose(u[0, 0], special.betaincinv(a, b, special.ndtr(eps)), atol=1e-10)


def _fd_check(phi, feats, log_w, noise, rel=1e-3):
    names = sorted(phi.weights)

    def obj(*ws):
        z, logq, _ = phi.transform(noise, feats, dict(zip(names, ws)))
        return ad.mean(log_w(z) - logq)

    g = ad.trace(obj, names)
    grads = ad.gradient(g, dict(phi.weights), names)
    W = phi.weights["cond.b3"]
    for idx in np.ndindex(W.shape):
        e = np.zeros_like(W)
        e[idx] = 1e-5
        plus = ad.evaluate(g, dict(phi.weights, **{"cond.b3": W + e}))
        minus = ad.evaluate(g, dict(phi.weights, **{"cond.b3": W - e}))
        num = (plus - minus) / 2e-5
        assert abs(grads["cond.b3"][idx] - num) <= rel * max(abs(num), 1e-2)


def test_reparameterised_gradient_beta():
    r = np.random.default_rng(0)
    phi = dequantizer_init("interval_beta", 1, 1, 4, r)
    phi = phi.with_weights({k: v + 0.3 * r.standard_normal(v.shape) for k, v in phi.weights.items()})
    feats = np.full((1, 1), 0.5)
    noise = r.standard_normal((10_000, 1))
    _fd_check(phi, feats, lambda u: -0.5 * u * u, noise)


def test_reparameterised_gradient_lognormal():
    r = np.random.default_rng(1)
    phi = dequantizer_init("radial_lognormal", 1, 1, 4, r)
    phi = phi.with_weights({k: v + 0.3 * r.standard_normal(v.shape) for k, v in phi.weights.items()})
    feats = np.full((1, 1), 0.5)
    noise = r.standard_normal((10_000, 1))
    _fd_check(phi, feats, lambda z: 2 * ad.log(z) - 0.5 * z * z, noise)


def test_families_listed():
    assert set(FAMILIES) == {"radial_lognormal", "product_radial_lognormal", "triplus_gaussian",
                             "interval_beta", "winding_categorical"}
