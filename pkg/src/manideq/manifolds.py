"""Embedded manifolds and the coordinate maps that expose them.

Each supported manifold Y sits inside an ambient Euclidean space X through a
smooth change of variables ``G: X -> Y x Z`` with an auxiliary manifold Z:

* sphere ``S^{m-1}``:  x -> (x / |x|, |x|), Z = R+
* torus ``T^m`` (Clifford embedding in R^{2m}): one polar split per pair
* Stiefel(n, p) / O(n): Cholesky polar decomposition M -> (O, L)
* integers:  x -> (floor x, x - floor x)
* circle angles:  x -> (x mod 2 pi, winding index)

All maps accept leading batch axes.  The ``join`` maps (G^-1) and the
density factors are written with :mod:`manideq.autodiff` operations so they
can be traced for gradients.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import linalg

TWO_PI = 2.0 * np.pi
NEAR_ORIGIN = 1e-12
RANK_TOL = 1e-10
CONSTRAINT_TOL = 1e-8


class ManifoldError(ValueError):
    pass


class NearOrigin(ManifoldError):
    pass


class RankDeficient(ManifoldError):
    pass


class ConstraintViolation(ManifoldError):
    pass


# -- manifold kinds ---------------------------------------------------------


@dataclass(frozen=True)
class Sphere:
    """Unit sphere S^{m-1} embedded in R^m."""

    m: int

    @property
    def ambient_shape(self):
        return (self.m,)

    @property
    def point_shape(self):
        return (self.m,)

    def residual(self, coords):
        return np.abs(np.sum(np.asarray(coords) ** 2, axis=-1) - 1.0)


@dataclass(frozen=True)
class Torus:
    """Clifford torus T^m: m unit circles in R^{2m}."""

    m: int

    @property
    def ambient_shape(self):
        return (2 * self.m,)

    @property
    def point_shape(self):
        return (2 * self.m,)

    def residual(self, coords):
        pairs = np.reshape(coords, np.shape(coords)[:-1] + (self.m, 2))
        return np.max(np.abs(np.sum(pairs**2, axis=-1) - 1.0), axis=-1)


@dataclass(frozen=True)
class Stiefel:
    """n x p matrices with orthonormal columns."""

    n: int
    p: int

    @property
    def ambient_shape(self):
        return (self.n, self.p)

    @property
    def point_shape(self):
        return (self.n, self.p)

    def residual(self, coords):
        M = np.asarray(coords)
        gram = np.swapaxes(M, -1, -2) @ M
        return np.max(np.abs(gram - np.eye(self.p)), axis=(-2, -1))


@dataclass(frozen=True)
class Orthogonal(Stiefel):
    """O(n) = Stiefel(n, n)."""

    def __init__(self, n):
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "p", n)

    def __repr__(self):
        return f"Orthogonal(n={self.n})"


@dataclass(frozen=True)
class SpecialOrthogonal(Stiefel):
    """SO(n): orthogonal matrices with determinant +1."""

    def __init__(self, n):
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "p", n)

    def __repr__(self):
        return f"SpecialOrthogonal(n={self.n})"

    def residual(self, coords):
        res = super().residual(coords)
        return np.maximum(res, np.abs(np.linalg.det(np.asarray(coords)) - 1.0))


@dataclass(frozen=True)
class Integer:
    """The integers, as a partition of the real line into unit cells."""

    @property
    def ambient_shape(self):
        return ()

    @property
    def point_shape(self):
        return ()

    def residual(self, coords):
        c = np.asarray(coords, dtype=np.float64)
        return np.abs(c - np.round(c))


@dataclass
class ManifoldPoint:
    """A point (or a batch of points) in the embedding coordinates of ``kind``."""

    kind: object
    coords: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        shape = self.kind.point_shape
        if shape and self.coords.shape[-len(shape):] != shape:
            raise ConstraintViolation(
                f"{self.kind} expects trailing shape {shape}, got {self.coords.shape}"
            )

    @property
    def residual(self):
        return constraint_check(self)

    def validate(self, tol=CONSTRAINT_TOL):
        res = self.residual
        if not res < tol:
            raise ConstraintViolation(f"point off {self.kind}: residual {res:.3e}")
        return self


AUXILIARY_KINDS = (
    "PositiveRadius",
    "RadiusVector",
    "TriPlus",
    "UnitInterval",
    "WindingIndex",
    "ReflectionBit",
)


@dataclass
class Auxiliary:
    """Coordinate on the auxiliary (nuisance) manifold Z."""

    kind: str
    value: np.ndarray

    def __post_init__(self):
        if self.kind not in AUXILIARY_KINDS:
            raise ValueError(f"unknown auxiliary kind {self.kind!r}")
        v = np.asarray(self.value)
        ok = True
        if self.kind in ("PositiveRadius", "RadiusVector"):
            ok = np.all(v > 0)
        elif self.kind == "TriPlus":
            ok = np.all(np.diagonal(v, axis1=-2, axis2=-1) > 0) and np.all(np.triu(v, 1) == 0)
        elif self.kind == "UnitInterval":
            ok = np.all((v >= 0) & (v < 1))
        elif self.kind in ("WindingIndex", "ReflectionBit"):
            ok = np.all(v == np.round(v))
            if self.kind == "ReflectionBit":
                ok = ok and np.all((v == 0) | (v == 1))
        if not ok:
            raise ConstraintViolation(f"value outside the support of {self.kind}")
        self.value = v


@dataclass
class CoordinateSplit:
    y: ManifoldPoint
    z: Auxiliary
    log_gram_jacobian: np.ndarray


def constraint_check(point):
    """Max-norm of the embedding constraint function at ``point`` (0 when valid)."""
    return float(np.max(point.kind.residual(point.coords), initial=0.0))


# -- sphere -----------------------------------------------------------------


def _radius(x):
    r = np.sqrt(np.sum(x * x, axis=-1))
    if np.any(r < NEAR_ORIGIN):
        raise NearOrigin("point within 1e-12 of the origin")
    return r


def sphere_split(x):
    x = np.asarray(x, dtype=np.float64)
    r = _radius(x)
    s = x / r[..., None]
    m = x.shape[-1]
    return CoordinateSplit(
        ManifoldPoint(Sphere(m), s), Auxiliary("PositiveRadius", r), -(m - 1) * np.log(r)
    )


def sphere_join(s, r):
    """x = r * s (polymorphic)."""
    return r[..., None] * s


def sphere_log_density_factor(r, m):
    """log r^{m-1}: minus the log Gram-Jacobian of the split at x = r s."""
    return (m - 1) * ad.log(r)


# -- torus ------------------------------------------------------------------


def _pair_expander(m):
    E = np.zeros((m, 2 * m))
    for i in range(m):
        E[i, 2 * i] = E[i, 2 * i + 1] = 1.0
    return E


def torus_split(x):
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[-1] // 2
    pairs = x.reshape(x.shape[:-1] + (m, 2))
    r = _radius(pairs)
    s = (pairs / r[..., None]).reshape(x.shape)
    return CoordinateSplit(
        ManifoldPoint(Torus(m), s), Auxiliary("RadiusVector", r), -np.sum(np.log(r), axis=-1)
    )


def torus_join(s, r, m):
    return s * (r @ _pair_expander(m))


def torus_log_density_factor(r):
    return ad.sum(ad.log(r), axis=-1)


def torus_angles(s):
    """Angles in [0, 2 pi) of Clifford-torus coordinates."""
    s = np.asarray(s, dtype=np.float64)
    m = s.shape[-1] // 2
    pairs = s.reshape(s.shape[:-1] + (m, 2))
    return np.mod(np.arctan2(pairs[..., 1], pairs[..., 0]), TWO_PI)


def torus_from_angles(theta):
    theta = np.asarray(theta, dtype=np.float64)
    pairs = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    return pairs.reshape(theta.shape[:-1] + (2 * theta.shape[-1],))


# -- Stiefel / orthogonal ---------------------------------------------------


def tril_indices(p):
    """Row-major (i >= j) index pairs of the free entries of a p x p lower-triangular matrix."""
    return np.tril_indices(p)


def tril_scatter(p):
    """Constant matrix S with vec(L) = entries @ S for the row-major lower triangle."""
    rows, cols = tril_indices(p)
    S = np.zeros((len(rows), p * p))
    S[np.arange(len(rows)), rows * p + cols] = 1.0
    return S


def tril_from_entries(entries, p):
    return ad.reshape_last(entries @ tril_scatter(p), 1, (p, p))


def tril_entries(L):
    p = np.shape(L)[-1] if not ad.is_symbolic(L) else None
    if p is None:
        raise TypeError("use tril_entries_of(L, p) for symbolic inputs")
    return tril_entries_of(L, p)


def tril_entries_of(L, p):
    rows, cols = tril_indices(p)
    return ad.getitem(L, (Ellipsis, rows, cols))


def _check_full_rank(M):
    gram = np.swapaxes(M, -1, -2) @ M
    w = linalg.jacobi_eigh(gram)[0]
    if np.any(w[..., 0] < RANK_TOL):
        raise RankDeficient(f"smallest eigenvalue of M^T M is {np.min(w[..., 0]):.3e}")


def polar_factors(M):
    """(O, P, L) of the Cholesky polar decomposition (polymorphic, no checks)."""
    Mt = ad.swapaxes(M, -1, -2)
    P = ad.symmetric_sqrt(Mt @ M)
    O = ad.swapaxes(ad.cholesky_solve(P, Mt), -1, -2)
    L = ad.cholesky(P)
    return O, P, L


def cholesky_polar_split(M, with_jacobian=True):
    """M -> (O, L) with O in Stiefel(n, p) and L L^T = sqrt(M^T M)."""
    M = np.asarray(M, dtype=np.float64)
    n, p = M.shape[-2:]
    _check_full_rank(M)
    O, _, L = polar_factors(M)
    # M P^-1 loses orthogonality as cond(M)^2; one Newton-Schulz step restores it
    O = O @ (1.5 * np.eye(p) - 0.5 * np.swapaxes(O, -1, -2) @ O)
    kind = Orthogonal(n) if n == p else Stiefel(n, p)
    logj = stiefel_log_gram_det(M) if with_jacobian else np.full(M.shape[:-2], np.nan)
    return CoordinateSplit(ManifoldPoint(kind, O), Auxiliary("TriPlus", L), logj)


def cholesky_polar_join(O, L):
    """M = O L L^T (polymorphic)."""
    return O @ (L @ ad.swapaxes(L, -1, -2))


def _stiefel_map(n, p):
    def G(M):
        O, _, L = polar_factors(M)
        flatO = ad.reshape_last(O, 2, (n * p,))
        return ad.concat([flatO, tril_entries_of(L, p)], axis=-1)

    return G


def log_gram_det(fn, x, event_ndim=1, mode="forward"):
    """log sqrt(det(J^T J)) for the Jacobian J of ``fn`` at each point of ``x``.

    ``fn`` maps arrays with ``event_ndim`` trailing axes to arrays with one
    trailing axis; columns of J come from :func:`autodiff.jvp`, one per input
    coordinate, evaluated together along a new leading axis.
    """
    x = np.asarray(x, dtype=np.float64)
    event = x.shape[x.ndim - event_ndim:]
    batch = x.shape[: x.ndim - event_ndim]
    d = int(np.prod(event))
    basis = np.eye(d).reshape((d,) + (1,) * len(batch) + event)
    xs = np.broadcast_to(x, (d,) + x.shape)
    vs = np.broadcast_to(basis, xs.shape)
    if mode == "fd":
        cols = np.stack([ad.jvp(fn, xs[j], vs[j], mode="fd").tangent for j in range(d)])
    else:
        cols = ad.jvp(fn, xs, vs, mode=mode).tangent
    J = np.moveaxis(cols, 0, -1)  # (..., out, d)
    gram = np.swapaxes(J, -1, -2) @ J
    return 0.5 * linalg.logdet_spd(gram)


def stiefel_log_gram_det(M, mode="forward"):
    """log Gram-Jacobian of the Cholesky polar split at M, assembled from jvp columns.

    The split is viewed as a map into R^{np} x R^{p(p+1)/2} (Stiefel block in
    its matrix embedding, Tri+ block as its free lower-triangular entries).
    """
    M = np.asarray(M, dtype=np.float64)
    n, p = M.shape[-2:]
    _check_full_rank(M)
    return log_gram_det(_stiefel_map(n, p), M, event_ndim=2, mode=mode)


def stiefel_log_density_factor(L, n, p):
    """Closed-form minus log Gram-Jacobian of the polar split, as a function of L.

    With P = L L^T and eigenvalues l_i of P, the Lebesgue volume on R^{n x p}
    factors as

        dM = prod_{i<j}(l_i + l_j) det(P)^{n-p} 2^p prod_i L_ii^{p-i+1}
             2^{-p(p-1)/4} dvol_Stiefel dvol_Tri+

    (the 2^{-p(p-1)/4} converts skew coordinates to the embedded metric), so
    the returned value is the log of that volume ratio.  Polymorphic in L.
    """
    idx = np.arange(p)
    log_diag = ad.log(ad.getitem(L, (Ellipsis, idx, idx)))
    out = ad.sum(log_diag * (p - idx + 2.0 * (n - p)), axis=-1)
    out = out + (p - p * (p - 1) / 4.0) * np.log(2.0)
    if p > 1:
        lam = ad.eigvalsh(L @ ad.swapaxes(L, -1, -2))
        i, j = np.triu_indices(p, 1)
        pair = ad.getitem(lam, (Ellipsis, i)) + ad.getitem(lam, (Ellipsis, j))
        out = out + ad.sum(ad.log(pair), axis=-1)
    return out


# -- SO(n) partition --------------------------------------------------------


def default_reflection(n):
    R = np.eye(n)
    R[0, 0] = -1.0
    return R


def so_n_split(Q, R=None):
    """Map O(n) onto SO(n): Q if det Q = +1, else R Q; also return which cell Q was in."""
    Q = np.asarray(Q, dtype=np.float64)
    n = Q.shape[-1]
    R = default_reflection(n) if R is None else np.asarray(R, dtype=np.float64)
    if Orthogonal(n).residual(Q).max(initial=0.0) > CONSTRAINT_TOL:
        raise ConstraintViolation("input is not orthogonal")
    flip = np.linalg.det(Q) < 0
    out = np.where(flip[..., None, None], R @ Q, Q)
    return ManifoldPoint(SpecialOrthogonal(n), out), Auxiliary("ReflectionBit", flip.astype(float))


# -- integers and angles ----------------------------------------------------


def integer_split(x):
    """x -> (floor x, x - floor x); unit Jacobian on every cell [n, n+1)."""
    x = np.asarray(x, dtype=np.float64)
    n = np.floor(x)
    u = x - n
    # tiny negative x rounds to u == 1
    over = u >= 1.0
    n = np.where(over, n + 1, n)
    u = np.where(over, 0.0, u)
    return CoordinateSplit(ManifoldPoint(Integer(), n), Auxiliary("UnitInterval", u), np.zeros_like(x))


def integer_join(n, u):
    return n + u


def modulus_split(x):
    """x -> (x mod 2 pi, k) with x = y + 2 pi k, per coordinate."""
    x = np.asarray(x, dtype=np.float64)
    k = np.floor(x / TWO_PI)
    y = x - TWO_PI * k
    # subnormal negative x gives x / 2 pi == -0.0
    under = y < 0.0
    y = np.where(under, y + TWO_PI, y)
    k = np.where(under, k - 1, k)
    # guard rounding at the upper edge of the cell
    over = y >= TWO_PI
    y = np.where(over, y - TWO_PI, y)
    k = np.where(over, k + 1, k)
    return y, Auxiliary("WindingIndex", k)


def modulus_join(y, k):
    return y + TWO_PI * k
