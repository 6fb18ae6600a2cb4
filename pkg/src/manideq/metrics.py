"""Sample-quality metrics: moment errors, normalizer, both KL directions, relative ESS.

Everything operates on log importance weights log w = -u(y) - log q(y) with a
single max-shift before exponentiation.  The "MSE" names follow the usual
table headings; the values are the norms themselves (not squared).
"""

from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp


class MetricsError(ValueError):
    pass


@dataclass
class MetricsReport:
    mean_mse: float
    cov_mse: float
    kl_q_p: float
    kl_p_q: float
    relative_ess: float
    z_hat: float
    n_samples: int
    z_rel_se: float = float("nan")

    def to_dict(self):
        return asdict(self)

    def check(self):
        vals = [self.mean_mse, self.cov_mse, self.kl_q_p, self.kl_p_q, self.relative_ess, self.z_hat]
        if not all(np.isfinite(vals)):
            raise MetricsError(f"non-finite metric in {self}")
        if not 0.0 < self.relative_ess <= 1.0:
            raise MetricsError(f"relative ESS {self.relative_ess} outside (0, 1]")
        return self


def _flat(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[0] == 0:
        raise MetricsError("empty sample set")
    return x.reshape(x.shape[0], int(np.prod(x.shape[1:])))


def moment_errors(model_samples, target_samples):
    """(|mean difference|_2, |covariance difference|_F) over embedding coordinates."""
    a, b = _flat(model_samples), _flat(target_samples)
    if len(a) == 0 or len(b) == 0:
        raise MetricsError("empty sample set")
    if a.shape[1] != b.shape[1]:
        raise MetricsError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    mean_err = float(np.linalg.norm(a.mean(axis=0) - b.mean(axis=0)))
    ca = np.cov(a, rowvar=False, bias=True) if len(a) > 1 else np.zeros((a.shape[1],) * 2)
    cb = np.cov(b, rowvar=False, bias=True) if len(b) > 1 else np.zeros((b.shape[1],) * 2)
    cov_err = float(np.linalg.norm(np.atleast_2d(ca - cb)))
    return mean_err, cov_err


def _check_weights(log_w):
    log_w = np.asarray(log_w, dtype=np.float64).ravel()
    if log_w.size == 0:
        raise MetricsError("no weights")
    if np.any(np.isnan(log_w)) or not np.any(np.isfinite(log_w)):
        raise MetricsError("all-zero or NaN importance weights")
    return log_w


def log_normalizing_constant(log_w):
    """(log Z_hat, relative standard error of Z_hat) from plain IS weights."""
    log_w = _check_weights(log_w)
    n = log_w.size
    shift = np.max(log_w)
    w = np.exp(log_w - shift)
    mean = w.mean()
    se = w.std(ddof=1) / np.sqrt(n) if n > 1 else float("nan")
    return float(np.log(mean) + shift), float(se / mean)


def normalizing_constant(log_w):
    log_z, rel_se = log_normalizing_constant(log_w)
    return float(np.exp(log_z)), rel_se


def relative_ess(log_w):
    """(sum w)^2 / (n sum w^2), invariant to rescaling the weights."""
    log_w = _check_weights(log_w)
    shift = np.max(log_w)
    w = np.exp(log_w - shift)
    return float(np.sum(w) ** 2 / (w.size * np.sum(w * w)))


def kl_q_p(log_q_model, log_unnorm_model, log_z):
    """KL(model || target) from model samples: E_q[log q + u] + log Z."""
    return float(np.mean(np.asarray(log_q_model) - np.asarray(log_unnorm_model)) + log_z)


def kl_p_q(log_q_target, log_unnorm_target, log_z):
    """KL(target || model) from target samples: E_p[-u - log q] - log Z."""
    return float(np.mean(np.asarray(log_unnorm_target) - np.asarray(log_q_target)) - log_z)


def kl_divergences(log_q_model, log_unnorm_model, log_q_target, log_unnorm_target):
    log_w = np.asarray(log_unnorm_model) - np.asarray(log_q_model)
    if log_w.size < 2:
        raise MetricsError("need at least two samples")
    log_z, _ = log_normalizing_constant(log_w)
    return (kl_q_p(log_q_model, log_unnorm_model, log_z),
            kl_p_q(log_q_target, log_unnorm_target, log_z))


def evaluate_samples(model_samples, log_q_model, log_unnorm_model,
                     target_samples, log_q_target, log_unnorm_target):
    """Full report from model draws and target draws with their log densities."""
    log_w = np.asarray(log_unnorm_model) - np.asarray(log_q_model)
    log_z, rel_se = log_normalizing_constant(log_w)
    mean_err, cov_err = moment_errors(model_samples, target_samples)
    return MetricsReport(
        mean_mse=mean_err,
        cov_mse=cov_err,
        kl_q_p=kl_q_p(log_q_model, log_unnorm_model, log_z),
        kl_p_q=kl_p_q(log_q_target, log_unnorm_target, log_z),
        relative_ess=relative_ess(log_w),
        z_hat=float(np.exp(log_z)),
        n_samples=int(np.asarray(log_w).size),
        z_rel_se=rel_se,
    )
