import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from manideq import metrics as mt
from manideq import targets as tg
from test_targets import sphere_quadrature, sphere4_z


def test_moment_examples():
    x = np.random.default_rng(0).standard_normal((50, 3))
    assert mt.moment_errors(x, x) == (0.0, 0.0)
    a = np.zeros((4, 2))
    b = np.tile([3.0, 4.0], (4, 1))
    assert mt.moment_errors(a, b) == (5.0, 0.0)


def test_moment_errors_gaussian_oracle():
    r = np.random.default_rng(1)
    n = 200_000
    a = r.standard_normal((n, 2))
    b = r.standard_normal((n, 2)) * [1.0, 2.0] + [0.3, -0.4]
    mean_err, cov_err = mt.moment_errors(a, b)
    assert abs(mean_err - 0.5) < 3 * np.sqrt(5 / n)
    assert abs(cov_err - 3.0) < 3 * 4 * np.sqrt(2 / n) * 2


def test_moment_errors_symmetric_and_checked():
    r = np.random.default_rng(2)
    a, b = r.standard_normal((30, 4)), r.standard_normal((40, 4))
    assert mt.moment_errors(a, b) == mt.moment_errors(b, a)
    with pytest.raises(mt.MetricsError):
        mt.moment_errors(a, r.standard_normal((10, 3)))
    with pytest.raises(mt.MetricsError):
        mt.moment_errors(a[:0], b)


def test_ess_edge_cases():
    assert mt.relative_ess(np.zeros(7)) == 1.0
    lw = np.full(8, -np.inf)
    lw[3] = 0.0
    assert mt.relative_ess(lw) == 1 / 8
    with pytest.raises(mt.MetricsError):
        mt.relative_ess(np.full(3, -np.inf))
    with pytest.raises(mt.MetricsError):
        mt.relative_ess(np.array([0.0, np.nan]))


@given(st.lists(st.integers(-400, 400), min_size=2, max_size=30), st.integers(-2000, 2000))
def test_ess_scale_invariant(ks, shift):
    # dyadic log weights keep the shift exact
    lw = np.array(ks) / 8.0
    assert mt.relative_ess(lw) == mt.relative_ess(lw + shift / 4.0)


def test_ess_scale_invariance_general_constant():
    lw = np.random.default_rng(3).standard_normal(1000)
    assert abs(mt.relative_ess(lw) - mt.relative_ess(lw + np.pi * 100)) < 1e-12


def test_kl_invariant_to_constant_in_u():
    r = np.random.default_rng(4)
    lq, lu = r.standard_normal(500), r.standard_normal(500)
    lqt, lut = r.standard_normal(500), r.standard_normal(500)
    a = mt.kl_divergences(lq, lu, lqt, lut)
    b = mt.kl_divergences(lq, lu + 7.25, lqt, lut + 7.25)
    assert np.allclose(a, b, atol=1e-10)


def test_normaliser_model_equals_target():
    lq = np.random.default_rng(5).standard_normal(100)
    z, se = mt.normalizing_constant(lq - 0.0 + 0.0 - lq)
    assert z == 1.0 and se == 0.0


def test_uniform_model_constant_target():
    n = 100_000
    z, _ = mt.normalizing_constant(np.full(n, np.log(4 * np.pi)))
    assert abs(z / (4 * np.pi) - 1) < 1e-12
    # a non-degenerate variant: uniform draws, target exp(y_3) symmetrised
    y = tg.uniform_sphere(3, np.random.default_rng(6), n)
    lw = np.log(4 * np.pi) + 0.0 * y[:, 0]
    assert abs(mt.normalizing_constant(lw)[0] / (4 * np.pi) - 1) < 0.01


def _uniform_vs_sphere4(n, seed):
    t = tg.make_target("sphere4")
    rng = np.random.default_rng(seed)
    y = tg.uniform_sphere(3, rng, n)
    lq = np.full(n, -np.log(4 * np.pi))
    yt = tg.rejection_sample(t, n, rng).points
    lqt = np.full(n, -np.log(4 * np.pi))
    return t, y, lq, yt, lqt


def test_uniform_model_vs_sphere4_against_quadrature():
    n = 10_000
    t, y, lq, yt, lqt = _uniform_vs_sphere4(n, 7)
    rep = mt.evaluate_samples(y, lq, t.log_unnorm(y), yt, lqt, t.log_unnorm(yt)).check()
    z = sphere4_z()
    assert abs(sphere_quadrature(lambda p: np.exp(t.log_unnorm(p))) / z - 1) < 0.005
    # forward KL of the uniform model: -log 4 pi - E_unif[log u~] + log Z
    mean_lu = sphere_quadrature(t.log_unnorm) / (4 * np.pi)
    kl_ref = -np.log(4 * np.pi) - mean_lu + np.log(z)
    # larger sample for the 2% comparison; the ESS of a uniform proposal is ~5%
    big = tg.uniform_sphere(3, np.random.default_rng(8), 400_000)
    lw_big = t.log_unnorm(big) + np.log(4 * np.pi)
    kl_big = mt.kl_q_p(np.full(len(big), -np.log(4 * np.pi)), t.log_unnorm(big),
                       mt.log_normalizing_constant(lw_big)[0])
    assert abs(kl_big / kl_ref - 1) < 0.02
    # relative ESS functional (int w)^2 / int w^2 under the uniform measure
    w1 = sphere_quadrature(lambda p: np.exp(t.log_unnorm(p))) / (4 * np.pi)
    w2 = sphere_quadrature(lambda p: np.exp(2 * t.log_unnorm(p))) / (4 * np.pi)
    assert abs(rep.relative_ess / (w1**2 / w2) - 1) < 0.02 * 5
    assert abs(mt.relative_ess(lw_big) / (w1**2 / w2) - 1) < 0.02
    assert rep.z_hat > 0 and rep.n_samples == n


def test_model_equals_target_kl_near_zero():
    # model = target: uniform density on the torus with a constant target
    n = 5000
    lq = np.full(n, -2 * np.log(2 * np.pi))
    lu = np.zeros(n)
    kq, kp = mt.kl_divergences(lq, lu, lq, lu)
    assert abs(kq) < 1e-12 and abs(kp) < 1e-12


def test_kl_near_nonnegative():
    t, y, lq, yt, lqt = _uniform_vs_sphere4(20_000, 9)
    kq, kp = mt.kl_divergences(lq, t.log_unnorm(y), lqt, t.log_unnorm(yt))
    assert kq > 0 and kp > 0


def test_report_check():
    rep = mt.MetricsReport(0.1, 0.1, 0.0, 0.0, 1.5, 1.0, 10)
    with pytest.raises(mt.MetricsError):
        rep.check()
    rep = mt.MetricsReport(np.nan, 0.1, 0.0, 0.0, 0.5, 1.0, 10)
    with pytest.raises(mt.MetricsError):
        rep.check()
    assert set(mt.MetricsReport(0, 0, 0, 0, 1, 1, 1).to_dict()) >= {
        "mean_mse", "cov_mse", "kl_q_p", "kl_p_q", "relative_ess", "z_hat", "n_samples"}
