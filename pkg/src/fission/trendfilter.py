"""Trend filtering with fission-based pointwise and uniform bands.

The solver minimizes 0.5 ||y - x||^2 + lam ||D x||_1 for the (k+1)-th
order difference matrix D, via an ADMM split z = D x with a banded
Cholesky for the x update and an exact active-set polish at the end.
Knots are the positions where the penalized differences of the fit stay
above a small threshold; a falling-factorial (truncated power) basis on
those knots carries the downstream interval construction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded
from scipy.optimize import brentq

from .errors import (
    InvalidParameters,
    NoConvergence,
    NotPositiveDefinite,
    RankDeficientBasis,
    SingularBasis,
    TooShort,
)
from .linalg import solve_spd, spd_inverse_sqrt, std_normal_cdf, std_normal_quantile, t_cdf

__all__ = [
    "TrendFit",
    "KnotSelection",
    "Band",
    "diff_matrix",
    "trend_lambda_grid",
    "trendfilter_admm",
    "trendfilter_path",
    "falling_factorial_basis",
    "pointwise_band",
    "multiplier_root",
    "uniform_multiplier",
    "uniform_band",
    "estimate_sigma_differences",
    "sure_score",
    "knot_select",
    "read_series",
]

_KNOT_RULES = ("cv_min", "cv_1se", "sure")
_DF_CONVENTIONS = ("knots", "knots_plus_one")


def diff_matrix(n: int, k: int) -> np.ndarray:
    """Difference operator of order k+1, shape (n-k-1) x n.

    Built by the recursion D(j+1) = D(1) D(j); rows hold signed binomial
    coefficients, exact in float arithmetic for any practical n.
    """
    if k < 0:
        raise InvalidParameters(f"order must be nonnegative, got {k}")
    if n < k + 2:
        raise TooShort(f"need n >= k + 2 points, got n={n}, k={k}")

    def first_order(m: int) -> np.ndarray:
        d = np.zeros((m - 1, m))
        idx = np.arange(m - 1)
        d[idx, idx] = -1.0
        d[idx, idx + 1] = 1.0
        return d

    d = first_order(n)
    for j in range(k):
        d = first_order(n - j - 1) @ d
    return d


def _check_series(y, name: str = "y") -> np.ndarray:
    arr = np.asarray(y, dtype=float)
    if arr.ndim != 1:
        raise InvalidParameters(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise InvalidParameters(f"{name} must be finite")
    return arr


def trend_lambda_grid(y, k: int, n_lambdas: int = 30, ratio: float = 1e-3) -> np.ndarray:
    """Descending penalty grid anchored at the smallest all-polynomial lam.

    At lam_max = ||(D D^T)^-1 D y||_inf the solution has D x = 0 exactly,
    so the grid top is the boundary of the constant-knot region.
    """
    arr = _check_series(y)
    if n_lambdas < 1 or not 0 < ratio < 1:
        raise InvalidParameters("need n_lambdas >= 1 and ratio in (0, 1)")
    d = diff_matrix(arr.size, k)
    lam_max = float(np.max(np.abs(solve_spd(d @ d.T, d @ arr))))
    # a polynomial input makes every penalty equivalent; keep the grid usable
    lam_max = max(lam_max, 1e-12)
    return np.geomspace(lam_max, lam_max * ratio, n_lambdas)


@dataclass
class TrendFit:
    """Penalized fit with the knot positions read off its differences.

    ``knots`` are 1-based time positions, directly usable as basis knots.
    """

    fitted: np.ndarray
    lam: float
    order: int
    knots: tuple
    objective: float
    iterations: int
    diagnostics: "KnotSelection | None" = None
    objective_trace: "np.ndarray | None" = None

    def __post_init__(self) -> None:
        self.fitted = np.asarray(self.fitted, dtype=float)
        if not np.all(np.isfinite(self.fitted)):
            raise InvalidParameters("fitted values must be finite")


@dataclass
class KnotSelection:
    """Score path behind a knot-selection rule."""

    rule: str
    lam_grid: np.ndarray
    scores: np.ndarray
    cv_se: "np.ndarray | None"
    chosen_index: int
    df_convention: "str | None" = None


class _Workspace:
    """Shared pieces for repeated solves on one (n, k) problem."""

    def __init__(self, n: int, k: int):
        self.n = n
        self.k = k
        self.d = diff_matrix(n, k)
        self.m = self.d.shape[0]
        dtd = self.d.T @ self.d
        bw = k + 1
        self.bands = np.zeros((bw + 1, n))
        for off in range(bw + 1):
            self.bands[bw - off, off:] = np.diagonal(dtd, off)
        self.bw = bw

    def factor(self, rho: float):
        ab = rho * self.bands
        ab[self.bw, :] += 1.0
        return cholesky_banded(ab, lower=False)


def _objective_value(y, d, x, lam) -> float:
    return float(0.5 * np.sum((y - x) ** 2) + lam * np.sum(np.abs(d @ x)))


_CERT_PERIOD = 250


def _admm_core(ws, y, lam, tol_abs, tol_rel, max_iter, record, warm):
    d = ws.d
    if warm is None:
        x = y.copy()
        z = d @ x
        u = np.zeros(ws.m)
        rho = lam
    else:
        x, z, u, rho = warm
        x, z, u = x.copy(), z.copy(), u.copy()
    factor = ws.factor(rho)
    trace = [] if record else None
    sqrt_m, sqrt_n = math.sqrt(ws.m), math.sqrt(ws.n)
    for it in range(1, max_iter + 1):
        x = cho_solve_banded((factor, False), y + rho * (d.T @ (z - u)))
        dx = d @ x
        z_old = z
        z = np.sign(dx + u) * np.maximum(np.abs(dx + u) - lam / rho, 0.0)
        u = u + dx - z
        if record:
            trace.append(_objective_value(y, d, x, lam))
        r_norm = float(np.linalg.norm(dx - z))
        s_norm = rho * float(np.linalg.norm(d.T @ (z - z_old)))
        eps_pri = sqrt_m * tol_abs + tol_rel * max(
            float(np.linalg.norm(dx)), float(np.linalg.norm(z))
        )
        eps_dual = sqrt_n * tol_abs + tol_rel * rho * float(np.linalg.norm(d.T @ u))
        if r_norm <= eps_pri and s_norm <= eps_dual:
            return x, z, u, rho, it, trace, False
        # the residual tail contracts slowly on this split, but the exact
        # solution is available as soon as the support is close: refine the
        # current active set and stop if the KKT certificate holds
        if it % _CERT_PERIOD == 0 or (it == max_iter and max_iter >= _CERT_PERIOD):
            x_exact = _refine_and_certify(y, d, lam, z)
            if x_exact is not None:
                return x_exact, z, u, rho, it, trace, True
        if it % 10 == 0:
            if r_norm > 10.0 * s_norm:
                rho *= 2.0
                u /= 2.0
                factor = ws.factor(rho)
            elif s_norm > 10.0 * r_norm:
                rho /= 2.0
                u *= 2.0
                factor = ws.factor(rho)
    raise NoConvergence(f"ADMM did not converge within {max_iter} iterations")


def _pattern_solve(y, d, lam, sgn):
    """Exact solve for a sign pattern: active rows pay lam * sign, the
    rest are constrained to zero difference.

    Returns (x, inactive multipliers), or None if the constrained gram
    fails to factor.
    """
    act = sgn != 0.0
    s = sgn[act]
    base = y - lam * (d[act].T @ s) if s.size else y.copy()
    b_rows = d[~act]
    if b_rows.shape[0] == 0:
        return base, np.zeros(0)
    try:
        t = solve_spd(b_rows @ b_rows.T, b_rows @ base)
    except NotPositiveDefinite:
        return None
    return base - b_rows.T @ t, t


def _refine_and_certify(y, d, lam, z, max_pivots: int = 40):
    """Active-set pivoting seeded by the split variable's support.

    Drops the worst sign-violating active row, then admits the worst
    multiplier-violating inactive row, re-solving each time. Returns the
    solution only when the full KKT certificate holds, which is
    sufficient for global optimality; otherwise None and the caller
    keeps iterating.
    """
    sgn = np.sign(z)
    for _ in range(max_pivots):
        solved = _pattern_solve(y, d, lam, sgn)
        if solved is None:
            return None
        x, mult = solved
        act_idx = np.flatnonzero(sgn != 0.0)
        if act_idx.size:
            da = d[act_idx] @ x
            sv = sgn[act_idx] * da
            i_bad = int(np.argmin(sv))
            if sv[i_bad] < -1e-10 * max(1.0, float(np.max(np.abs(da)))):
                sgn[act_idx[i_bad]] = 0.0
                continue
        if mult.size:
            j_bad = int(np.argmax(np.abs(mult)))
            if abs(mult[j_bad]) > lam * (1.0 + 1e-9):
                sgn[np.flatnonzero(sgn == 0.0)[j_bad]] = np.sign(mult[j_bad])
                continue
        return x
    return None


def _polish(y, d, lam, z):
    solved = _pattern_solve(y, d, lam, np.sign(z))
    return None if solved is None else solved[0]


def _extract_knots(x, d, k) -> tuple:
    thr = 1e-6 * max(1.0, float(np.max(np.abs(x))))
    rows = np.flatnonzero(np.abs(d @ x) > thr)
    return tuple(int(r) + k + 1 for r in rows)


def trendfilter_admm(
    y,
    k: int,
    lam: float,
    *,
    tol_abs: float = 1e-9,
    tol_rel: float = 1e-9,
    max_iter: int = 20000,
    polish: bool = True,
    record_objective: bool = False,
) -> TrendFit:
    """Solve 0.5 ||y - x||^2 + lam ||D x||_1 for one penalty value."""
    arr = _check_series(y)
    if not (lam >= 0.0 and math.isfinite(lam)):
        raise InvalidParameters(f"lam must be nonnegative and finite, got {lam}")
    ws = _Workspace(arr.size, k)
    return _solve_one(ws, arr, lam, tol_abs, tol_rel, max_iter, polish, record_objective, None)[0]


def _solve_one(ws, y, lam, tol_abs, tol_rel, max_iter, polish, record, warm):
    d = ws.d
    if lam == 0.0:
        fit = TrendFit(
            fitted=y.copy(),
            lam=0.0,
            order=ws.k,
            knots=_extract_knots(y, d, ws.k),
            objective=0.0,
            iterations=0,
            objective_trace=np.zeros(0) if record else None,
        )
        return fit, None
    x, z, u, rho, it, trace, exact = _admm_core(
        ws, y, lam, tol_abs, tol_rel, max_iter, record, warm
    )
    obj = _objective_value(y, d, x, lam)
    if polish and not exact:
        x_pol = _refine_and_certify(y, d, lam, z)
        if x_pol is None:
            x_pol = _polish(y, d, lam, z)
        if x_pol is not None:
            obj_pol = _objective_value(y, d, x_pol, lam)
            if obj_pol <= obj + 1e-9 * (1.0 + abs(obj)):
                x, obj = x_pol, obj_pol
    fit = TrendFit(
        fitted=x,
        lam=float(lam),
        order=ws.k,
        knots=_extract_knots(x, d, ws.k),
        objective=obj,
        iterations=it,
        objective_trace=np.asarray(trace) if record else None,
    )
    return fit, (fit.fitted, z, u, rho)


def trendfilter_path(
    y,
    k: int,
    lam_grid,
    *,
    tol_abs: float = 1e-8,
    tol_rel: float = 1e-8,
    max_iter: int = 20000,
    polish: bool = True,
) -> list:
    """Warm-started solves along a descending penalty grid."""
    arr = _check_series(y)
    grid = np.asarray(lam_grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0 or np.any(grid < 0) or np.any(np.diff(grid) >= 0):
        raise InvalidParameters("lam_grid must be strictly descending and nonnegative")
    ws = _Workspace(arr.size, k)
    fits = []
    warm = None
    for lam in grid:
        fit, warm = _solve_one(ws, arr, lam, tol_abs, tol_rel, max_iter, polish, False, warm)
        fits.append(fit)
    return fits


def falling_factorial_basis(knots, k: int, n: int) -> np.ndarray:
    """Polynomial columns 1, t, ..., t^k plus one truncated term per knot.

    For k = 0 the knot column is the indicator of t > knot; for k >= 1 it
    is ((t - knot)_+)^k. Exact falling-factorial products for k >= 2
    differ from these truncated powers only by lower-order terms spanning
    the same space on an evenly spaced grid.
    """
    if k < 0 or n < k + 1:
        raise InvalidParameters(f"need n >= k + 1 for the polynomial part, got n={n}, k={k}")
    taus = np.unique(np.asarray(knots, dtype=float))
    if taus.size and not np.all(np.isfinite(taus)):
        raise InvalidParameters("knots must be finite")
    # a k=0 knot at t=1 still yields a nonconstant indicator, so admit it
    if k == 0:
        if taus.size and (taus.min() < 1.0 or taus.max() >= n):
            raise InvalidParameters(f"k=0 knots must lie in [1, {n}), got {knots}")
    elif taus.size and (taus.min() <= 1.0 or taus.max() >= n):
        raise InvalidParameters(f"knots must lie strictly inside (1, {n}), got {knots}")
    t = np.arange(1, n + 1, dtype=float)
    cols = [t**j for j in range(k + 1)]
    for tau in taus:
        if k == 0:
            cols.append(np.where(t > tau, 1.0, 0.0))
        else:
            cols.append(np.maximum(t - tau, 0.0) ** k)
    a = np.column_stack(cols)
    if np.linalg.matrix_rank(a) < a.shape[1]:
        raise RankDeficientBasis(
            f"basis with {taus.size} knots has rank below {a.shape[1]} columns"
        )
    return a


def _check_tau_alpha(tau: float, alpha: float) -> None:
    if not (tau > 0 and math.isfinite(tau)):
        raise InvalidParameters(f"tau must be positive and finite, got {tau}")
    if not 0.0 < alpha < 1.0:
        raise InvalidParameters(f"alpha must lie in (0, 1), got {alpha}")


def _as_cov(sigma, n: int) -> np.ndarray:
    if np.isscalar(sigma):
        if sigma < 0:
            raise InvalidParameters("variance scale must be nonnegative")
        return float(sigma) * np.eye(n)
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim == 1:
        if sigma.shape != (n,) or np.any(sigma < 0):
            raise InvalidParameters("diagonal covariance must be nonnegative, length n")
        return np.diag(sigma)
    if sigma.shape != (n, n):
        raise InvalidParameters(f"covariance must be {n}x{n}, got {sigma.shape}")
    if not np.allclose(sigma, sigma.T, atol=1e-10):
        raise InvalidParameters("covariance must be symmetric")
    return (sigma + sigma.T) / 2.0


@dataclass
class Band:
    """Interval band around fitted centers.

    ``multiplier`` is the critical value scaling the standard errors;
    uniform bands additionally record the curve length ``gamma_len``
    driving the tube correction.
    """

    centers: np.ndarray
    halfwidths: np.ndarray
    kind: str
    multiplier: float
    level: float
    gamma_len: "float | None" = None

    def __post_init__(self) -> None:
        self.centers = np.asarray(self.centers, dtype=float)
        self.halfwidths = np.asarray(self.halfwidths, dtype=float)
        if self.centers.shape != self.halfwidths.shape or self.centers.ndim != 1:
            raise InvalidParameters("centers and halfwidths must be equal-length vectors")
        if not np.all(self.halfwidths > 0):
            raise InvalidParameters("halfwidths must be strictly positive")
        if self.kind not in ("pointwise", "uniform"):
            raise InvalidParameters(f"unknown band kind {self.kind!r}")
        if not 0.0 < self.level < 1.0:
            raise InvalidParameters(f"level must lie in (0, 1), got {self.level}")

    @property
    def lower(self) -> np.ndarray:
        return self.centers - self.halfwidths

    @property
    def upper(self) -> np.ndarray:
        return self.centers + self.halfwidths

    def to_csv(self, path, t=None) -> None:
        if t is None:
            t = np.arange(1, self.centers.size + 1)
        t = np.asarray(t, dtype=float)
        if t.shape != self.centers.shape:
            raise InvalidParameters("time column must match the band length")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "fit", "lower", "upper", "kind"])
            for i in range(t.size):
                ti = int(t[i]) if float(t[i]).is_integer() else repr(float(t[i]))
                writer.writerow(
                    [
                        ti,
                        repr(float(self.centers[i])),
                        repr(float(self.lower[i])),
                        repr(float(self.upper[i])),
                        self.kind,
                    ]
                )


def _basis_regression(g_y, basis_a):
    g_y = _check_series(g_y, "g_y")
    a = np.asarray(basis_a, dtype=float)
    if a.ndim != 2 or a.shape[0] != g_y.size:
        raise InvalidParameters("basis must be a matrix with one row per observation")
    gram = a.T @ a
    # Cholesky can slip through an exactly singular gram on some BLAS builds
    vals = np.linalg.eigvalsh((gram + gram.T) / 2.0)
    if vals[0] <= vals[-1] * gram.shape[0] * 1e-12:
        raise SingularBasis("basis columns are numerically collinear")
    try:
        beta = solve_spd(gram, a.T @ g_y)
    except NotPositiveDefinite as exc:
        raise SingularBasis(f"basis columns are collinear: {exc}") from None
    return g_y, a, gram, beta


def pointwise_band(g_y, basis_a, a_rows, sigma, tau: float, alpha: float) -> Band:
    """Per-point intervals for the projected mean at the given rows.

    ``sigma`` is the noise covariance of the raw series (scalar variance,
    diagonal vector, or full matrix); the inference-part inflation
    (1 + 1/tau^2) is applied internally.
    """
    _check_tau_alpha(tau, alpha)
    g_y, a, gram, beta = _basis_regression(g_y, basis_a)
    rows = a if a_rows is None else np.asarray(a_rows, dtype=float)
    if rows.ndim != 2 or rows.shape[1] != a.shape[1]:
        raise InvalidParameters("evaluation rows must match the basis width")
    cov = _as_cov(sigma, g_y.size)
    try:
        half_solve = solve_spd(gram, a.T @ cov @ a)
        mid = solve_spd(gram, half_solve.T).T
    except NotPositiveDefinite as exc:
        raise SingularBasis(f"basis columns are collinear: {exc}") from None
    var = (1.0 + tau**-2) * np.einsum("ij,jk,ik->i", rows, mid, rows)
    z = float(std_normal_quantile(1 - alpha / 2))
    return Band(
        centers=rows @ beta,
        halfwidths=z * np.sqrt(np.maximum(var, 0.0)),
        kind="pointwise",
        multiplier=z,
        level=1 - alpha,
    )


def multiplier_root(gamma_len: float, alpha: float, df=None) -> float:
    """Root of the tube equation for the simultaneous-band multiplier.

    Gaussian version: gamma/(2 pi) exp(-c^2/2) + 1 - Phi(c) = alpha/2.
    With ``df`` = v: gamma/(2 pi) (1 + c^2/v)^(-v/2) + P(t_v > c) = alpha/2.
    """
    if not (gamma_len >= 0 and math.isfinite(gamma_len)):
        raise InvalidParameters(f"curve length must be nonnegative, got {gamma_len}")
    if not 0.0 < alpha < 1.0:
        raise InvalidParameters(f"alpha must lie in (0, 1), got {alpha}")
    if df is not None and not df >= 1:
        raise InvalidParameters(f"degrees of freedom must be >= 1, got {df}")

    def lhs(c: float) -> float:
        if df is None:
            tube = gamma_len / (2 * math.pi) * math.exp(-(c**2) / 2.0)
            tail = 1.0 - float(std_normal_cdf(c))
        else:
            tube = gamma_len / (2 * math.pi) * (1.0 + c**2 / df) ** (-df / 2.0)
            tail = 1.0 - float(t_cdf(c, df))
        return tube + tail

    target = alpha / 2.0
    if lhs(0.0) <= target:
        return 0.0
    hi = 10.0
    while lhs(hi) > target:
        hi *= 2.0
        if hi > 1e12:
            raise NoConvergence("tube multiplier bracket grew past 1e12")
    return float(brentq(lambda c: lhs(c) - target, 0.0, hi, xtol=1e-13, rtol=8.9e-16))


def uniform_multiplier(basis_a, alpha: float, df=None):
    """Multiplier and curve length for a simultaneous band on this basis."""
    a = np.asarray(basis_a, dtype=float)
    if a.ndim != 2 or a.shape[0] < 2:
        raise InvalidParameters("basis must be a matrix with at least two rows")
    try:
        root_inv = spd_inverse_sqrt(a.T @ a)
    except NotPositiveDefinite as exc:
        raise SingularBasis(f"basis columns are collinear: {exc}") from None
    rows = a @ root_inv
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms == 0):
        raise InvalidParameters("basis evaluates to the zero vector at some point")
    tilde = rows / norms[:, None]
    gamma_len = float(np.sum(np.linalg.norm(np.diff(tilde, axis=0), axis=1)))
    return multiplier_root(gamma_len, alpha, df=df), gamma_len


def uniform_band(
    g_y,
    basis_a,
    sigma: float,
    tau: float,
    alpha: float,
    use_t: bool = False,
    df=None,
    a_rows=None,
) -> Band:
    """Simultaneous band; requires homoscedastic noise with SD ``sigma``.

    The t-variant (``use_t``) needs the residual degrees of freedom
    ``df``, conventionally n minus knots minus one.
    """
    _check_tau_alpha(tau, alpha)
    if not np.isscalar(sigma) or not (sigma > 0 and math.isfinite(sigma)):
        raise InvalidParameters("sigma must be a positive scalar SD")
    if use_t and df is None:
        raise InvalidParameters("the t-version needs degrees of freedom")
    g_y, a, gram, beta = _basis_regression(g_y, basis_a)
    rows = a if a_rows is None else np.asarray(a_rows, dtype=float)
    if rows.ndim != 2 or rows.shape[1] != a.shape[1]:
        raise InvalidParameters("evaluation rows must match the basis width")
    c, gamma_len = uniform_multiplier(a, alpha, df=df if use_t else None)
    lev = np.einsum("ij,ji->i", rows, solve_spd(gram, rows.T))
    halfwidths = c * float(sigma) * np.sqrt((1.0 + tau**-2) * np.maximum(lev, 0.0))
    return Band(
        centers=rows @ beta,
        halfwidths=halfwidths,
        kind="uniform",
        multiplier=c,
        level=1 - alpha,
        gamma_len=gamma_len,
    )


def estimate_sigma_differences(y) -> float:
    """Noise variance from successive differences; biased up by any trend."""
    arr = _check_series(y)
    if arr.size < 2:
        raise TooShort("variance from differences needs at least two points")
    return float(np.sum(np.diff(arr) ** 2) / (2.0 * (arr.size - 1)))


def sure_score(y, fitted, n_knots: int, sigma2: float, df_convention: str = "knots") -> float:
    """Unbiased risk estimate: mean squared residual plus 2 sigma^2 df / n."""
    arr = _check_series(y)
    fit = _check_series(fitted, "fitted")
    if fit.shape != arr.shape:
        raise InvalidParameters("fitted values must match the series length")
    if not (sigma2 > 0 and math.isfinite(sigma2)):
        raise InvalidParameters(f"sigma2 must be positive, got {sigma2}")
    if df_convention not in _DF_CONVENTIONS:
        raise InvalidParameters(f"unknown df convention {df_convention!r}")
    df = n_knots + (1 if df_convention == "knots_plus_one" else 0)
    n = arr.size
    return float(np.mean((arr - fit) ** 2) + 2.0 * sigma2 * df / n)


def knot_select(
    f_part,
    k: int,
    rule: str = "cv_min",
    *,
    sigma2=None,
    lam_grid=None,
    n_lambdas: int = 30,
    fold_stride: int = 5,
    df_convention: str = "knots",
    rng=None,
    tol_abs: float = 1e-7,
    tol_rel: float = 1e-7,
    max_iter: int = 20000,
) -> TrendFit:
    """Pick the penalty by CV or SURE on the selection part only.

    Cross validation holds out every ``fold_stride``-th point and scores
    held-out points by linear interpolation of the fit on the retained
    ones; the scheme is deterministic, so ``rng`` is accepted only for
    interface compatibility.
    """
    del rng
    arr = _check_series(f_part, "f_part")
    if rule not in _KNOT_RULES:
        raise InvalidParameters(f"unknown selection rule {rule!r}")
    if rule == "sure":
        if sigma2 is None:
            raise InvalidParameters("SURE needs the noise variance sigma2")
        if not (sigma2 > 0 and math.isfinite(sigma2)):
            raise InvalidParameters(f"sigma2 must be positive, got {sigma2}")
    if lam_grid is None:
        lam_grid = trend_lambda_grid(arr, k, n_lambdas)
    grid = np.asarray(lam_grid, dtype=float)

    if rule == "sure":
        fits = trendfilter_path(
            arr, k, grid, tol_abs=tol_abs, tol_rel=tol_rel, max_iter=max_iter
        )
        scores = np.array(
            [sure_score(arr, f.fitted, len(f.knots), sigma2, df_convention) for f in fits]
        )
        chosen = int(np.argmin(scores))
        fit = fits[chosen]
        fit.diagnostics = KnotSelection(
            rule="sure",
            lam_grid=grid,
            scores=scores,
            cv_se=None,
            chosen_index=chosen,
            df_convention=df_convention,
        )
        return fit

    n = arr.size
    if fold_stride < 2:
        raise InvalidParameters(f"fold stride must be at least 2, got {fold_stride}")
    t_all = np.arange(1, n + 1, dtype=float)
    fold_err = np.empty((fold_stride, grid.size))
    for j in range(fold_stride):
        held = np.arange(j, n, fold_stride)
        kept = np.setdiff1d(np.arange(n), held)
        if kept.size < k + 2:
            raise InvalidParameters("too few retained points per fold for this order")
        fits = trendfilter_path(
            arr[kept], k, grid, tol_abs=tol_abs, tol_rel=tol_rel,
            max_iter=max_iter, polish=False,
        )
        for i, fold_fit in enumerate(fits):
            pred = np.interp(t_all[held], t_all[kept], fold_fit.fitted)
            fold_err[j, i] = float(np.mean((arr[held] - pred) ** 2))
    scores = fold_err.mean(axis=0)
    cv_se = fold_err.std(axis=0, ddof=1) / math.sqrt(fold_stride)
    i_min = int(np.argmin(scores))
    if rule == "cv_min":
        chosen = i_min
    else:
        cutoff = scores[i_min] + cv_se[i_min]
        chosen = int(np.flatnonzero(scores <= cutoff)[0])
    fit = trendfilter_admm(
        arr, k, float(grid[chosen]), tol_abs=tol_abs, tol_rel=tol_rel, max_iter=max_iter
    )
    fit.diagnostics = KnotSelection(
        rule=rule, lam_grid=grid, scores=scores, cv_se=cv_se, chosen_index=chosen
    )
    return fit


def read_series(path):
    """Two-column (t, y) reader for whitespace- or comma-separated text."""
    with open(path) as fh:
        first = ""
        for line in fh:
            if line.strip():
                first = line
                break
    delimiter = "," if "," in first else None
    try:
        data = np.loadtxt(path, delimiter=delimiter, ndmin=2)
    except ValueError as exc:
        raise InvalidParameters(f"could not parse series file: {exc}") from None
    if data.ndim != 2 or data.shape[1] != 2:
        raise InvalidParameters(f"expected two columns (t, y), got shape {data.shape}")
    return data[:, 0].copy(), data[:, 1].copy()
