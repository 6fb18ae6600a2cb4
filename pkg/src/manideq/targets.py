"""Unnormalized target densities, reference samplers and rejection sampling.

Printed target constants live in ``data/targets.json`` together with a
SHA-256 of their canonical serialization; :func:`load_constants` refuses a
file whose checksum does not match.
"""

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
from scipy.special import logsumexp

from .manifolds import (
    ConstraintViolation,
    Orthogonal,
    Sphere,
    SpecialOrthogonal,
    Torus,
    default_reflection,
    torus_angles,
)

CONSTANTS_FILE = "targets.json"


class ChecksumError(RuntimeError):
    pass


class BoundViolation(RuntimeError):
    pass


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def load_constants(path=None):
    if path is None:
        text = resources.files("manideq").joinpath("data", CONSTANTS_FILE).read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    doc = json.loads(text)
    digest = hashlib.sha256(_canonical(doc["targets"])).hexdigest()
    if digest != doc["sha256"]:
        raise ChecksumError(f"target constants checksum mismatch ({digest} != {doc['sha256']})")
    return doc["targets"]


@dataclass
class TargetSpec:
    """exp(log_unnorm(y)) is proportional to the target density on ``manifold``."""

    name: str
    manifold: object
    log_unnorm_fn: object = field(repr=False)
    log_upper_bound: float
    params: dict = field(default_factory=dict, repr=False)
    proposal: str = "uniform"

    def log_unnorm(self, y):
        y = np.asarray(y, dtype=np.float64)
        shape = self.manifold.point_shape
        if y.shape[y.ndim - len(shape):] != shape:
            raise ConstraintViolation(
                f"target {self.name} lives on {self.manifold}; got points of shape {y.shape}"
            )
        return self.log_unnorm_fn(y)

    def sample_proposal(self, count, rng):
        man = self.manifold
        if isinstance(man, Sphere):
            return uniform_sphere(man.m, rng, count)
        if isinstance(man, Torus):
            return uniform_torus(man.m, rng, count)
        if isinstance(man, SpecialOrthogonal):
            return haar_special_orthogonal(man.n, rng, count, method=self.proposal)
        if isinstance(man, Orthogonal):
            return haar_orthogonal(man.n, rng, count)
        raise ValueError(f"no proposal for {man}")


# -- reference samplers -------------------------------------------------------


def uniform_sphere(m, rng, count=1):
    x = rng.standard_normal((count, m))
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def uniform_torus(m, rng, count=1):
    theta = rng.uniform(0.0, 2.0 * np.pi, size=(count, m))
    pairs = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    return pairs.reshape(count, 2 * m)


def haar_orthogonal(n, rng, count=1):
    """QR of a Gaussian matrix with the sign of diag(R) folded into Q."""
    G = rng.standard_normal((count, n, n))
    Q, R = np.linalg.qr(G)
    d = np.sign(np.diagonal(R, axis1=-2, axis2=-1))
    d[d == 0] = 1.0
    return Q * d[:, None, :]


def haar_special_orthogonal(n, rng, count=1, method="project"):
    """Haar on SO(n): ``project`` maps det -1 draws through R, ``filter`` discards them."""
    if method in ("project", "uniform"):
        Q = haar_orthogonal(n, rng, count)
        flip = np.linalg.det(Q) < 0
        Q[flip] = default_reflection(n) @ Q[flip]
        return Q
    if method == "filter":
        out = []
        have = 0
        while have < count:
            Q = haar_orthogonal(n, rng, 2 * (count - have) + 8)
            Q = Q[np.linalg.det(Q) > 0]
            out.append(Q)
            have += len(Q)
        return np.concatenate(out)[:count]
    raise ValueError(f"unknown SO(n) proposal {method!r}")


# -- targets ------------------------------------------------------------------


def _vmf_mixture(name, modes, kappa):
    modes = np.asarray(modes, dtype=np.float64)

    def fn(y):
        return logsumexp(kappa * (y @ modes.T), axis=-1)

    bound = float(np.log(len(modes)) + kappa)
    return TargetSpec(name, Sphere(modes.shape[1]), fn, bound, {"modes": modes, "kappa": kappa})


def _torus_unimodal_terms(theta, phases):
    return np.sum(np.cos(theta[..., None, :] - phases), axis=-1)


def make_target(name, constants=None, proposal="project"):
    c = load_constants() if constants is None else constants
    if name in ("sphere4", "s3mix"):
        return _vmf_mixture(name, c[name]["modes"], c[name]["concentration"])
    if name in ("torus_unimodal", "torus_multimodal"):
        phases = np.asarray(c[name]["phases"], dtype=np.float64)

        def fn(y):
            return logsumexp(_torus_unimodal_terms(torus_angles(y), phases), axis=-1)

        return TargetSpec(name, Torus(2), fn, float(np.log(len(phases)) + 2.0), {"phases": phases})
    if name == "torus_correlated":
        off = float(c[name]["offset"])

        def fn(y):
            th = torus_angles(y)
            return np.cos(th[..., 0] + th[..., 1] - off)

        return TargetSpec(name, Torus(2), fn, 1.0, {"offset": off})
    if name == "so3_multimodal":
        centers = np.asarray(c[name]["centers"], dtype=np.float64)
        sigma = float(c[name]["sigma"])

        def fn(O):
            d = np.sum((O[..., None, :, :] - centers) ** 2, axis=(-2, -1))
            return logsumexp(-d / (2 * sigma**2), axis=-1)

        return TargetSpec(name, SpecialOrthogonal(3), fn, float(np.log(len(centers))),
                          {"centers": centers, "sigma": sigma}, proposal=proposal)
    if name == "procrustes":
        A, B, O_star = procrustes_fixture(c[name])
        sigma = float(c[name]["sigma"])

        def fn(O):
            res = B - O @ A
            return -np.sum(res * res, axis=(-2, -1)) / (2 * sigma**2)

        # B = O* A exactly, so the supremum 0 is attained at O*
        return TargetSpec(name, Orthogonal(int(c[name]["n"])), fn, 0.0,
                          {"A": A, "B": B, "O_star": O_star, "sigma": sigma})
    raise KeyError(f"unknown target {name!r}")


def procrustes_fixture(spec):
    """(A, B, O*) with A entries N(0, scale^2), O* Haar on O(n) and B = O* A."""
    rng = np.random.default_rng(int(spec["fixture_seed"]))
    n, p = int(spec["n"]), int(spec["p"])
    A = spec["entry_scale"] * rng.standard_normal((n, p))
    O_star = haar_orthogonal(n, rng, 1)[0]
    return A, O_star @ A, O_star


TARGET_NAMES = (
    "sphere4",
    "s3mix",
    "torus_unimodal",
    "torus_multimodal",
    "torus_correlated",
    "procrustes",
    "so3_multimodal",
)


def target_log_unnorm(target, y):
    return target.log_unnorm(y)


# -- rejection sampling -------------------------------------------------------


@dataclass
class RejectionResult:
    points: np.ndarray
    acceptance_rate: float
    n_proposed: int


def rejection_sample(target, count, rng, chunk=None):
    """Exact draws from exp(log_unnorm) using the uniform/Haar proposal of ``target``."""
    bound = target.log_upper_bound
    if not np.isfinite(bound):
        raise BoundViolation("rejection sampling needs a finite upper bound")
    chunk = chunk or max(1000, 4 * count)
    accepted = []
    have = 0
    proposed = 0
    n_acc = 0
    while have < count:
        y = target.sample_proposal(chunk, rng)
        lu = target.log_unnorm(y)
        if np.any(lu > bound + 1e-12):
            raise BoundViolation(
                f"{target.name}: log_unnorm {np.max(lu):.6g} exceeds bound {bound:.6g}"
            )
        keep = np.log(rng.uniform(size=chunk)) < lu - bound
        accepted.append(y[keep])
        have += int(keep.sum())
        n_acc += int(keep.sum())
        proposed += chunk
    points = np.concatenate(accepted)[:count]
    return RejectionResult(points, n_acc / proposed, proposed)


# -- serialization ------------------------------------------------------------


def _flat(points):
    points = np.asarray(points, dtype=np.float64)
    return points.reshape(points.shape[0], -1)


def write_samples_csv(path, points, header=None):
    flat = _flat(points)
    with open(path, "w") as fh:
        if header:
            fh.write(f"# {header}\n")
        fh.write(",".join(f"y{i}" for i in range(flat.shape[1])) + "\n")
        for row in flat:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_samples_csv(path, point_shape=None):
    rows = [ln for ln in open(path) if not ln.startswith("#")]
    data = np.array([[float(v) for v in ln.split(",")] for ln in rows[1:]])
    if point_shape:
        data = data.reshape((-1,) + tuple(point_shape))
    return data


def write_samples_jsonl(path, points, log_unnorm, header=None):
    flat = _flat(points)
    with open(path, "w") as fh:
        if header:
            fh.write(json.dumps({"header": header}) + "\n")
        for row, lu in zip(flat, np.asarray(log_unnorm)):
            fh.write(json.dumps({"y": [float(v) for v in row], "log_unnorm": float(lu)}) + "\n")
