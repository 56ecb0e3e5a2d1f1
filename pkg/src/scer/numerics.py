"""Dense kernels shared by every other module.

Everything here works on float64 numpy arrays. Covariance matrices are plain
``(p, p)`` arrays; the factorization helpers validate them on use rather than
wrapping them in a class.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import lapack


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Raised when a Cholesky factorization hits a non-positive pivot."""

    def __init__(self, minor: int, dim: int):
        self.minor = minor
        self.dim = dim
        super().__init__(
            f"leading minor of order {minor} (of {dim}) is not positive definite"
        )


def std_normal_cdf(x: float) -> float:
    """Standard normal CDF.

    Uses ``Phi(x) = erfc(-x / sqrt(2)) / 2``. The complementary error function
    keeps full relative precision in the lower tail, so values like
    ``Phi(-8) ~ 6e-16`` are not lost to cancellation.
    """
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"std_normal_cdf requires a finite argument, got {x!r}")
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def std_normal_cdf_array(x) -> np.ndarray:
    """Vectorized :func:`std_normal_cdf`."""
    from scipy.special import ndtr

    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("std_normal_cdf requires finite arguments")
    return ndtr(x)


def as_vector(v, name: str = "v") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def as_square(sigma, name: str = "sigma") -> np.ndarray:
    arr = np.asarray(sigma, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {arr.shape}")
    return arr


def sigma_norm(v, sigma) -> float:
    """Mahalanobis-style norm ``sqrt(v^T Sigma v)``."""
    v = as_vector(v)
    sigma = as_square(sigma)
    if sigma.shape[0] != v.shape[0]:
        raise ValueError(
            f"dimension mismatch: vector has {v.shape[0]} entries, sigma is {sigma.shape}"
        )
    quad = float(v @ sigma @ v)
    if quad < -1e-12:
        raise np.linalg.LinAlgError(
            f"v^T Sigma v = {quad:.3e} < 0; sigma is not positive definite"
        )
    return math.sqrt(max(quad, 0.0))


def default_ridge(cov: np.ndarray) -> float:
    """``1e-4 * trace(cov) / p``; the ridge used when none is given."""
    p = cov.shape[0]
    return 1e-4 * float(np.trace(cov)) / p


def pooled_covariance(samples, ridge: float | None = None) -> np.ndarray:
    """Divide-by-N covariance of ``samples`` (rows) plus ``ridge * I``.

    ``ridge=None`` selects :func:`default_ridge` of the unregularized estimate.
    The result is symmetrized explicitly so it is exactly symmetric.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"samples must be a 2-d array of row vectors, got shape {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"pooled_covariance needs at least 2 samples, got {n}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / n
    cov = 0.5 * (cov + cov.T)
    if ridge is None:
        ridge = default_ridge(cov)
    if ridge < 0:
        raise ValueError(f"ridge must be nonnegative, got {ridge}")
    if ridge:
        cov = cov + ridge * np.eye(cov.shape[0])
    return cov


def cholesky(sigma) -> np.ndarray:
    """Lower Cholesky factor ``L`` with ``sigma = L L^T``.

    Raises :class:`NotPositiveDefiniteError` naming the first failing leading
    minor.
    """
    sigma = as_square(sigma)
    if not np.all(np.isfinite(sigma)):
        raise ValueError("sigma has non-finite entries")
    factor, info = lapack.dpotrf(sigma, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(int(info), sigma.shape[0])
    if info < 0:
        raise ValueError(f"dpotrf: illegal argument {-info}")
    return factor


def solve_spd(sigma, v) -> np.ndarray:
    """Solve ``sigma u = v`` for symmetric positive-definite ``sigma``."""
    sigma = as_square(sigma)
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != sigma.shape[0]:
        raise ValueError(
            f"dimension mismatch: rhs has {v.shape[0]} rows, sigma is {sigma.shape}"
        )
    factor = cholesky(sigma)
    u, info = lapack.dpotrs(factor, v, lower=1)
    if info != 0:
        raise ValueError(f"dpotrs failed with info={info}")
    return u


def condition_number(sigma) -> float:
    """2-norm condition number; logged to monitor batch covariances."""
    return float(np.linalg.cond(as_square(sigma)))
