# mot_core.py
"""
Dense numerical primitives shared by every solver.

Vectors and matrices are plain float64 numpy arrays. Masses are always
nonnegative reals; counts are converted at ingestion.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from errors import DomainError

# Log-domain is preferred when eps falls below this fraction of the median cost
LOG_DOMAIN_RATIO = 0.05
# exp(-700) is within a few decades of the smallest normal double
LINEAR_EXP_LIMIT = 700.0


@dataclass(frozen=True)
class Epsilon:
    """Entropy-regularization weight."""
    value: float

    def __post_init__(self):
        if not np.isfinite(self.value) or self.value <= 0:
            raise DomainError(f"eps must be a positive finite real, got {self.value}")

    def __float__(self):
        return float(self.value)


def eps_value(eps) -> float:
    """Accept an Epsilon or a bare float and return the validated float."""
    if isinstance(eps, Epsilon):
        return eps.value
    return Epsilon(float(eps)).value


def as_vector(values, name: str = "vector") -> np.ndarray:
    """Validate a DenseVector: 1-D, finite, nonnegative."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 1:
        raise DomainError(f"{name} must be one-dimensional, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DomainError(f"{name} has non-finite entries")
    if np.any(v < 0):
        raise DomainError(f"{name} has negative entries")
    return v


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    """Validate a DenseMatrix: 2-D, finite."""
    m = np.asarray(values, dtype=float)
    if m.ndim != 2:
        raise DomainError(f"{name} must be two-dimensional, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DomainError(f"{name} has non-finite entries")
    return m


def normalize(values) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    total = v.sum()
    if total <= 0:
        raise DomainError("cannot normalize a vector with zero total mass")
    return v / total


def kl_divergence(p, q) -> float:
    """
    Normalized KL divergence H(p | q) = sum(p ln(p/q) - p + q), with 0 ln 0 = 0.

    Works on vectors, matrices or tensors of equal shape.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise DomainError(f"shape mismatch: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise DomainError("kl_divergence needs nonnegative arguments")

    support = p > 0
    if np.any(q[support] == 0):
        raise DomainError("q vanishes where p is positive")

    ps = p[support]
    log_term = float(np.sum(ps * np.log(ps / q[support])))
    return log_term - float(p.sum()) + float(q.sum())


def neg_entropy(p) -> float:
    """H(p | 1) = sum(p ln p - p + 1)."""
    p = np.asarray(p, dtype=float)
    return kl_divergence(p, np.ones_like(p))


def gibbs_kernel(C, eps) -> np.ndarray:
    """K = exp(-C / eps), element-wise."""
    return np.exp(-np.asarray(C, dtype=float) / eps_value(eps))


def logsumexp_matvec(logK, logv) -> np.ndarray:
    """Row i: log sum_j exp(logK[i, j] + logv[j]), stabilized."""
    logK = np.asarray(logK, dtype=float)
    logv = np.asarray(logv, dtype=float)
    if logK.ndim != 2 or logv.ndim != 1 or logK.shape[1] != logv.shape[0]:
        raise DomainError(f"non-conformable shapes {logK.shape} and {logv.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        return logsumexp(logK + logv[None, :], axis=1)


def safe_log(values) -> np.ndarray:
    """Natural log with log(0) = -inf and no warnings."""
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(values, dtype=float))


def prefers_log_domain(costs, eps) -> bool:
    """True when eps is small relative to the median of the given costs, or any Gibbs entry would underflow."""
    flat = np.concatenate([np.abs(np.asarray(c, dtype=float)).ravel() for c in costs])
    if flat.size == 0:
        return False
    eps = eps_value(eps)
    return eps < LOG_DOMAIN_RATIO * float(np.median(flat)) or float(flat.max()) > LINEAR_EXP_LIMIT * eps
