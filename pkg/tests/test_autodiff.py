import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from manideq import autodiff as ad
from conftest import spd


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        step = h * (1.0 + abs(x[idx]))
        e[idx] = step
        g[idx] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def test_evaluate_examples():
    assert ad.evaluate(ad.trace(ad.tanh, ["x"]), {"x": 0.0}) == 0.0
    g = ad.trace(lambda x: ad.sum(x * x), ["x"])
    assert ad.evaluate(g, {"x": np.array([1.0, 2.0])}) == 5.0
    g = ad.trace(lambda x: ad.log(ad.softplus(x)), ["x"])
    assert np.isclose(ad.evaluate(g, {"x": 0.0}), np.log(np.log(2.0)))
    assert np.isclose(np.log(np.log(2.0)), -0.3665, atol=1e-4)


def test_gradient_examples():
    g = ad.trace(lambda x: ad.sum(x * x), ["x"])
    assert np.array_equal(ad.gradient(g, {"x": np.array([1.0, 2.0])}, ["x"])["x"], [2.0, 4.0])
    g = ad.trace(ad.tanh, ["x"])
    assert ad.gradient(g, {"x": 0.0}, ["x"])["x"] == 1.0


def test_jvp_examples():
    r = ad.jvp(lambda x: x, np.array([0.3, -2.0]), np.array([1.0, 0.0]))
    assert np.array_equal(r.tangent, [1.0, 0.0]) and r.mode == "forward"
    r = ad.jvp(lambda x: x * x, np.array(3.0), np.array(1.0))
    assert r.tangent == 6.0


def test_jvp_fd_fallback_records_mode():
    r = ad.jvp(lambda x: np.sin(x) ** 2, np.array([0.4, 1.0]), np.array([1.0, 1.0]), mode="fd")
    assert r.mode == "fd"
    assert np.allclose(r.tangent, np.sin(2 * np.array([0.4, 1.0])), atol=1e-8)


def test_jvp_falls_back_for_untraceable():
    def f(x):
        return np.asarray(x, dtype=float) ** 3

    r = ad.jvp(f, np.array([2.0]), np.array([1.0]))
    assert np.allclose(r.tangent, 12.0, rtol=1e-6)


def test_two_layer_network_gradient(rng):
    W1, b1 = rng.standard_normal((5, 3)), rng.standard_normal(5)
    w2 = rng.standard_normal(5)
    X = rng.standard_normal((7, 3))

    def loss(W):
        h = ad.tanh(ad.matmul(X, ad.swapaxes(W, 0, 1)) + b1)
        return ad.mean(ad.softplus(ad.matmul(h, w2)))

    g = ad.trace(loss, ["W"])
    grad = ad.gradient(g, {"W": W1}, ["W"])["W"]
    num = fd_grad(lambda W: loss(W), W1, h=1e-5)
    assert np.max(np.abs(grad - num)) / np.max(np.abs(grad)) < 1e-5


# unary building blocks with their safe input transforms
_UNARY = [
    ("tanh", ad.tanh, lambda x: x),
    ("exp", ad.exp, lambda x: 0.3 * x),
    ("log", ad.log, lambda x: x * x + 0.5),
    ("softplus", ad.softplus, lambda x: x),
    ("sqrt", ad.sqrt, lambda x: x * x + 0.5),
    ("sin", ad.sin, lambda x: x),
    ("cos", ad.cos, lambda x: x),
    ("square", ad.square, lambda x: x),
    ("gammaln", ad.gammaln, lambda x: x * x + 0.7),
    ("log_ndtr", ad.log_ndtr, lambda x: x),
]


def _random_program(seed):
    """Random scalar composition over a (3, 3) input mixing unary, binary and shape ops."""
    r = np.random.default_rng(seed)
    consts = r.standard_normal((6, 3, 3))
    steps = []
    for _ in range(r.integers(3, 7)):
        kind = r.integers(0, 8)
        steps.append((kind, int(r.integers(0, len(_UNARY))), int(r.integers(0, 6))))

    def f(x):
        h = x
        for kind, u, c in steps:
            C = consts[c]
            if kind == 0:
                _, fn, pre = _UNARY[u]
                h = fn(pre(h))
            elif kind == 1:
                h = h * C + ad.tanh(h)
            elif kind == 2:
                h = ad.matmul(h, C) * 0.3
            elif kind == 3:
                h = h / (ad.softplus(C + h) + 1.0)
            elif kind == 4:
                h = ad.concat([h[:, :2], ad.reshape(ad.sum(h, axis=1), (3, 1))], axis=-1)
            elif kind == 5:
                h = ad.swapaxes(h, 0, 1) - C
            elif kind == 6:
                h = ad.broadcast_to(ad.logsumexp(h, axis=0), (3, 3)) * 0.5 + ad.stack([h[0], h[1], h[2]])
            else:
                h = ad.where(C > 0, ad.tanh(h), h * 0.5) + ad.clip(C, -0.5, 0.5)
        return ad.sum(ad.tanh(h) * consts[0])

    return f


def test_fifty_random_graphs_match_finite_differences():
    worst = 0.0
    for seed in range(60):
        f = _random_program(seed)
        x = np.random.default_rng(1000 + seed).standard_normal((3, 3))
        g = ad.trace(f, ["x"])
        grad = ad.gradient(g, {"x": x}, ["x"])["x"]
        num = fd_grad(f, x, h=1e-6)
        scale = max(np.max(np.abs(num)), 1e-3)
        worst = max(worst, np.max(np.abs(grad - num)) / scale)
    assert worst < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_jvp_consistent_with_gradient(seed):
    f = _random_program(seed)
    r = np.random.default_rng(seed)
    x, v = r.standard_normal((3, 3)), r.standard_normal((3, 3))
    g = ad.trace(f, ["x"])
    grad = ad.gradient(g, {"x": x}, ["x"])["x"]
    t = ad.jvp(g, x, v)
    assert t.mode == "forward"
    assert abs(np.sum(grad * v) - t.tangent) < 1e-8 * max(1.0, abs(t.tangent))


def test_eager_and_traced_bit_identical(rng):
    f = _random_program(3)
    x = rng.standard_normal((3, 3))
    assert ad.evaluate(ad.trace(f, ["x"]), {"x": x}) == f(x)


def test_linear_algebra_gradients(rng):
    P0 = spd(rng, 3)
    B = rng.standard_normal((3, 2))
    C = rng.standard_normal((3, 3))

    def f(P):
        P = 0.5 * (P + ad.swapaxes(P, 0, 1))
        L = ad.cholesky(P)
        S = ad.symmetric_sqrt(P)
        X = ad.cholesky_solve(P, B)
        return ad.sum(L * C) + ad.sum(S * C) + ad.sum(X * X) + ad.sum(ad.log(ad.eigvalsh(P)))

    g = ad.trace(f, ["P"])
    grad = ad.gradient(g, {"P": P0}, ["P"])["P"]
    num = fd_grad(f, P0, h=1e-6)
    assert np.max(np.abs(grad - num)) < 1e-6 * max(1.0, np.max(np.abs(num)))
    v = rng.standard_normal((3, 3))
    assert np.isclose(ad.jvp(g, P0, v).tangent, np.sum(grad * v), rtol=1e-8)


def test_cholesky_examples():
    assert np.array_equal(ad.cholesky(np.eye(2)), np.eye(2))
    assert np.allclose(ad.cholesky(4 * np.eye(2)), 2 * np.eye(2))
    assert np.allclose(ad.symmetric_sqrt(4 * np.eye(2)), 2 * np.eye(2))
    assert np.allclose(ad.symmetric_sqrt(np.eye(3)), np.eye(3))


@given(st.integers(1, 6), st.integers(0, 2**31))
def test_cholesky_inverts_lower_product(n, seed):
    r = np.random.default_rng(seed)
    L = np.tril(r.standard_normal((n, n)))
    np.fill_diagonal(L, np.abs(np.diag(L)) + 0.5)
    assert np.max(np.abs(ad.cholesky(L @ L.T) - L)) < 1e-10 * max(1.0, np.max(np.abs(L)))


@pytest.mark.filterwarnings("ignore:invalid value encountered:RuntimeWarning")
def test_errors():
    g = ad.trace(lambda x: x * 2.0, ["x"])
    with pytest.raises(ad.GraphError):
        ad.gradient(g, {"x": np.ones(2)}, ["x"])
    with pytest.raises(ad.GraphError):
        ad.evaluate(g, {})
    g = ad.trace(lambda x: ad.sum(x), ["x"])
    with pytest.raises(ad.GraphError):
        ad.gradient(g, {"x": np.ones(2)}, ["y"])
    g = ad.trace(lambda x: ad.log(x), ["x"])
    with pytest.raises(ad.NonFiniteError) as exc:
        ad.evaluate(g, {"x": np.array([-1.0])})
    assert exc.value.node_id is not None
    g = ad.trace(lambda a, b: ad.matmul(a, b), ["a", "b"])
    with pytest.raises(ad.ShapeError):
        ad.evaluate(g, {"a": np.ones((2, 3)), "b": np.ones((2, 3))})
    with pytest.raises(ad.ShapeError):
        ad.jvp(lambda x: x, np.ones(2), np.ones(3))


def test_evaluate_is_deterministic_and_thread_safe(rng):
    f = _random_program(7)
    g = ad.trace(f, ["x"])
    xs = [rng.standard_normal((3, 3)) for _ in range(8)]
    expected = [ad.gradient(g, {"x": x}, ["x"])["x"] for x in xs]
    results = [None] * len(xs)

    def work(i):
        for _ in range(20):
            results[i] = ad.gradient(g, {"x": xs[i]}, ["x"])["x"]

    threads = [threading.Thread(target=work, args=(i,)) for i in range(len(xs))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for a, b in zip(results, expected):
        assert np.array_equal(a, b)


def test_custom_op_gradient():
    cube = ad.custom("cube", lambda a: a**3, vjp=lambda g, out, a: (3 * a * a * g,),
                     jvp=lambda ts, out, a: 3 * a * a * ts[0])
    g = ad.trace(lambda x: ad.sum(cube(x)), ["x"])
    x = np.array([1.0, -2.0])
    assert np.allclose(ad.gradient(g, {"x": x}, ["x"])["x"], [3.0, 12.0])
    assert np.isclose(ad.jvp(g, x, np.array([1.0, 1.0])).tangent, 15.0)
