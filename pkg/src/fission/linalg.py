"""Dense linear algebra and special functions used throughout the package.

Matrices are plain numpy arrays; the helpers here add the symmetry and
positive-definiteness checks the inference code relies on, plus the handful
of distribution functions (normal, chi-square, Student t) needed for
interval construction.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
import scipy.special

from .errors import DomainError, NonSquare, NotPositiveDefinite

SYMMETRY_RTOL = 1e-10


def _as_symmetric(m: np.ndarray) -> np.ndarray:
    """Validate approximate symmetry and return the symmetrized matrix."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise NonSquare(f"expected square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DomainError("matrix has non-finite entries")
    scale = max(np.abs(m).max(), 1.0)
    if np.abs(m - m.T).max() > SYMMETRY_RTOL * scale:
        raise DomainError("matrix is not symmetric within tolerance")
    return (m + m.T) / 2.0


def cholesky(m: np.ndarray) -> np.ndarray:
    """Lower-triangular L with L @ L.T == m, for symmetric positive-definite m."""
    sym = _as_symmetric(m)
    try:
        return np.linalg.cholesky(sym)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc


def solve_spd(m: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve m @ x = rhs for symmetric positive-definite m."""
    L = cholesky(m)
    rhs = np.asarray(rhs, dtype=float)
    return scipy.linalg.cho_solve((L, True), rhs)


def spd_inverse(m: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive-definite matrix."""
    return solve_spd(m, np.eye(np.asarray(m).shape[0]))


def sym_eigen(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and orthonormal eigenvectors of a symmetric matrix."""
    sym = _as_symmetric(m)
    vals, vecs = np.linalg.eigh(sym)
    order = np.argsort(vals)[::-1]
    return vals[order], vecs[:, order]


def spd_inverse_sqrt(m: np.ndarray) -> np.ndarray:
    """Symmetric R with R @ m @ R == identity, for positive-definite m."""
    vals, vecs = sym_eigen(m)
    if vals[-1] <= 0:
        raise NotPositiveDefinite("non-positive eigenvalue")
    return (vecs / np.sqrt(vals)) @ vecs.T


def log_gamma(x: float) -> float:
    if np.any(np.asarray(x) <= 0):
        raise DomainError("log_gamma requires x > 0")
    return scipy.special.gammaln(x)


def std_normal_cdf(x):
    return scipy.special.ndtr(x)


def std_normal_quantile(p):
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0) | (p >= 1)):
        raise DomainError("quantile requires p in (0,1)")
    out = scipy.special.ndtri(p)
    return float(out) if out.ndim == 0 else out


def chisq_cdf(x, df: float):
    if df <= 0:
        raise DomainError("chi-square df must be positive")
    return scipy.special.chdtr(df, np.maximum(x, 0.0))


def chisq_quantile(p: float, df: float) -> float:
    if df < 0:
        raise DomainError("chi-square df must be nonnegative")
    if df == 0:
        # Degenerate case: chi-square with 0 df is a point mass at 0.
        return 0.0
    if not 0 <= p < 1:
        raise DomainError("quantile requires p in [0,1)")
    if p == 0:
        return 0.0
    return float(scipy.special.chdtri(df, 1.0 - p))


def t_cdf(x, df: float):
    if df <= 0:
        raise DomainError("t df must be positive")
    return scipy.special.stdtr(df, x)


def t_quantile(p: float, df: float) -> float:
    if df <= 0:
        raise DomainError("t df must be positive")
    if not 0 < p < 1:
        raise DomainError("quantile requires p in (0,1)")
    return float(scipy.special.stdtrit(df, p))
