"""Small dense linear-algebra kernels, vectorized over leading batch axes.

Matrices in this project are tiny (at most 16x16), so every kernel loops over
the matrix dimension in Python and over the batch with numpy.
"""

import numpy as np

SYMMETRY_TOL = 1e-10
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 64


class LinAlgError(ValueError):
    pass


class NotPositiveDefinite(LinAlgError):
    pass


class NotSymmetric(LinAlgError):
    pass


def _check_square(P):
    P = np.asarray(P, dtype=np.float64)
    if P.ndim < 2 or P.shape[-1] != P.shape[-2]:
        raise LinAlgError(f"expected square matrices, got shape {P.shape}")
    return P


def _check_symmetric(P, tol=SYMMETRY_TOL):
    scale = np.maximum(1.0, np.max(np.abs(P), axis=(-2, -1), initial=0.0))
    asym = np.max(np.abs(P - np.swapaxes(P, -1, -2)), axis=(-2, -1), initial=0.0)
    if np.any(asym > tol * scale):
        raise NotSymmetric(f"matrix not symmetric (max asymmetry {np.max(asym):.3e})")


def cholesky(P, check_symmetric=True):
    """Lower-triangular L with positive diagonal and L @ L.T == P."""
    P = _check_square(P)
    if check_symmetric:
        _check_symmetric(P)
    n = P.shape[-1]
    L = np.zeros_like(P)
    for j in range(n):
        pivot = P[..., j, j] - np.sum(L[..., j, :j] ** 2, axis=-1)
        if np.any(~(pivot > 0.0)):
            raise NotPositiveDefinite(f"non-positive pivot at column {j}")
        d = np.sqrt(pivot)
        L[..., j, j] = d
        if j + 1 < n:
            below = P[..., j + 1 :, j] - np.einsum(
                "...ik,...k->...i", L[..., j + 1 :, :j], L[..., j, :j]
            )
            L[..., j + 1 :, j] = below / d[..., None]
    return L


def solve_lower(L, B):
    """Forward substitution for L X = B (L lower triangular)."""
    n = L.shape[-1]
    X = np.zeros(np.broadcast_shapes(L.shape[:-2], B.shape[:-2]) + B.shape[-2:])
    for i in range(n):
        acc = B[..., i, :] - np.einsum("...k,...kj->...j", L[..., i, :i], X[..., :i, :])
        X[..., i, :] = acc / L[..., i, i, None]
    return X


def solve_upper(U, B):
    """Back substitution for U X = B (U upper triangular)."""
    n = U.shape[-1]
    X = np.zeros(np.broadcast_shapes(U.shape[:-2], B.shape[:-2]) + B.shape[-2:])
    for i in reversed(range(n)):
        acc = B[..., i, :] - np.einsum(
            "...k,...kj->...j", U[..., i, i + 1 :], X[..., i + 1 :, :]
        )
        X[..., i, :] = acc / U[..., i, i, None]
    return X


def cholesky_solve(P, B):
    """Solve P X = B for symmetric positive-definite P."""
    L = cholesky(P)
    Y = solve_lower(L, np.asarray(B, dtype=np.float64))
    return solve_upper(np.swapaxes(L, -1, -2), Y)


def logdet_spd(P):
    """log det P through the Cholesky factor."""
    L = cholesky(P)
    return 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)


def jacobi_eigh(P, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Symmetric eigendecomposition by cyclic Jacobi rotations.

    Returns ``(w, U)`` with ``P = U diag(w) U.T``; eigenvalues ascending.
    Sweeps stop once the off-diagonal Frobenius norm of every matrix in the
    batch drops below ``tol`` times its Frobenius norm (floored at 1).
    """
    P = _check_square(P)
    _check_symmetric(P)
    n = P.shape[-1]
    A = 0.5 * (P + np.swapaxes(P, -1, -2))
    V = np.broadcast_to(np.eye(n), A.shape).copy()
    scale = np.maximum(1.0, np.sqrt(np.sum(A**2, axis=(-2, -1))))
    offmask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.where(offmask, A, 0.0) ** 2, axis=(-2, -1)))
        if np.all(off < tol * scale):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[..., p, q]
                app = A[..., p, p]
                aqq = A[..., q, q]
                nonzero = np.abs(apq) > 1e-300
                safe = np.where(nonzero, apq, 1.0)
                theta = (aqq - app) / (2.0 * safe)
                t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
                t = np.where(theta == 0.0, 1.0, t)
                t = np.where(nonzero, t, 0.0)
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                c1 = c[..., None]
                s1 = s[..., None]
                # A <- J^T A J with J the (p, q) Givens rotation
                Ap = A[..., :, p].copy()
                Aq = A[..., :, q].copy()
                A[..., :, p] = c1 * Ap - s1 * Aq
                A[..., :, q] = s1 * Ap + c1 * Aq
                Ap = A[..., p, :].copy()
                Aq = A[..., q, :].copy()
                A[..., p, :] = c1 * Ap - s1 * Aq
                A[..., q, :] = s1 * Ap + c1 * Aq
                Vp = V[..., :, p].copy()
                Vq = V[..., :, q].copy()
                V[..., :, p] = c1 * Vp - s1 * Vq
                V[..., :, q] = s1 * Vp + c1 * Vq
    else:
        raise LinAlgError("Jacobi eigendecomposition did not converge")
    w = np.diagonal(A, axis1=-2, axis2=-1).copy()
    order = np.argsort(w, axis=-1)
    w = np.take_along_axis(w, order, axis=-1)
    V = np.take_along_axis(V, order[..., None, :], axis=-1)
    return w, V


def symmetric_sqrt(P):
    """Principal square root of a symmetric positive (semi-)definite matrix."""
    w, U = jacobi_eigh(P)
    if np.any(w < -1e-10):
        raise NotPositiveDefinite(f"negative eigenvalue {np.min(w):.3e}")
    root = np.sqrt(np.clip(w, 0.0, None))
    B = (U * root[..., None, :]) @ np.swapaxes(U, -1, -2)
    return 0.5 * (B + np.swapaxes(B, -1, -2))
