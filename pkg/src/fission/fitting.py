"""Selection- and inference-stage estimators.

Ordinary least squares, Newton/IRLS fits for Gaussian, Poisson (log
link), and binomial (logit link) responses with offsets and weights,
and a coordinate-descent lasso for the same families with K-fold
cross-validation and the one-standard-error tuning rule.

The lasso standardizes covariates internally (centered, scaled by the
population standard deviation) and keeps an always-present, unpenalized
intercept; reported slopes and intercepts are on the original scale.
The penalized objective is

    (1/n) sum_i w_i nll_i(b0 + x_i' b + offset_i) + lam * ||b||_1
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    InvalidParameters,
    NoConvergence,
    NotPositiveDefinite,
    SeparationDetected,
    SingularDesign,
)
from .linalg import solve_spd
from .rng import RngStream

__all__ = [
    "FAMILIES",
    "Design",
    "FitResult",
    "LassoResult",
    "ols",
    "glm_irls",
    "lambda_grid",
    "lasso_cd",
    "cv_select",
]

FAMILIES = ("gaussian", "poisson", "binomial")

# logistic linear predictors beyond this bound mean (quasi-)separation
_SEPARATION_BOUND = 30.0
_IRLS_TOL = 1e-8
_KKT_TOL = 1e-8
_CD_TOL = 1e-11
_ETA_CAP = 300.0


@dataclass
class Design:
    """A regression problem: covariates, response, family, offset, weights."""

    x: np.ndarray
    y: np.ndarray
    family: str = "gaussian"
    offset: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim != 2:
            raise InvalidParameters(f"design matrix must be 2-d, got shape {x.shape}")
        n = x.shape[0]
        if y.shape != (n,):
            raise InvalidParameters(
                f"response of shape {y.shape} does not match {n} design rows"
            )
        if self.family not in FAMILIES:
            raise InvalidParameters(f"unknown family {self.family!r}")
        if self.family == "poisson" and (np.any(y < 0) or np.any(y != np.floor(y))):
            raise InvalidParameters("poisson responses must be nonnegative integers")
        if self.family == "binomial" and not np.all((y == 0.0) | (y == 1.0)):
            raise InvalidParameters("binomial responses must be 0 or 1")
        offset = (
            np.zeros(n) if self.offset is None else np.asarray(self.offset, dtype=float)
        )
        weights = (
            np.ones(n) if self.weights is None else np.asarray(self.weights, dtype=float)
        )
        if offset.shape != (n,):
            raise InvalidParameters("offset length does not match the design")
        if weights.shape != (n,):
            raise InvalidParameters("weights length does not match the design")
        if np.any(weights <= 0) or not np.all(np.isfinite(weights)):
            raise InvalidParameters("weights must be positive and finite")
        if not (
            np.all(np.isfinite(x)) and np.all(np.isfinite(y)) and np.all(np.isfinite(offset))
        ):
            raise InvalidParameters("covariates, response, and offset must be finite")
        self.x = x
        self.y = y
        self.offset = offset
        self.weights = weights

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


@dataclass
class FitResult:
    """Coefficients and fitted means from an unpenalized fit.

    ``intercept`` records whether an intercept column was added
    internally; the plain fitters never do, callers supply one.
    """

    coefficients: np.ndarray
    intercept: bool
    fitted: np.ndarray
    converged: bool
    iterations: int


@dataclass
class LassoResult:
    """Solution path on a descending penalty grid, original scale.

    Cross-validation fields are populated by ``cv_select`` only.
    """

    lam_grid: np.ndarray
    path: np.ndarray
    intercepts: np.ndarray
    cv_mean: np.ndarray | None = None
    cv_se: np.ndarray | None = None
    lambda_min: float | None = None
    lambda_1se: float | None = None
    support: np.ndarray | None = None


def _mean_from_eta(family: str, eta: np.ndarray) -> np.ndarray:
    if family == "gaussian":
        return eta
    if family == "poisson":
        return np.exp(eta)
    return 1.0 / (1.0 + np.exp(-eta))


def _variance_from_mean(family: str, m: np.ndarray) -> np.ndarray:
    if family == "gaussian":
        return np.ones_like(m)
    if family == "poisson":
        return m
    return m * (1.0 - m)


def _neg_loglik(design: Design, eta: np.ndarray) -> float:
    """Weighted negative log likelihood, dropping response-only constants."""
    w, y = design.weights, design.y
    if design.family == "gaussian":
        return 0.5 * float(w @ (y - eta) ** 2)
    if design.family == "poisson":
        return float(w @ (np.exp(eta) - y * eta))
    return float(w @ (np.logaddexp(0.0, eta) - y * eta))


def _unit_deviance(family: str, y: np.ndarray, m: np.ndarray) -> np.ndarray:
    if family == "gaussian":
        return (y - m) ** 2
    if family == "poisson":
        m = np.maximum(m, 1e-300)
        safe_y = np.where(y > 0, y, 1.0)
        term = np.where(y > 0, y * np.log(safe_y / m), 0.0)
        return 2.0 * (term - (y - m))
    m = np.clip(m, 1e-12, 1.0 - 1e-12)
    return -2.0 * (y * np.log(m) + (1.0 - y) * np.log1p(-m))


def ols(design: Design) -> FitResult:
    """Exact (weighted) least squares via the normal equations."""
    if design.family != "gaussian":
        raise InvalidParameters("ols requires the gaussian family")
    x, w = design.x, design.weights
    z = design.y - design.offset
    xtwx = (x * w[:, None]).T @ x
    xtwz = (x * w[:, None]).T @ z
    try:
        coef = solve_spd(xtwx, xtwz)
    except NotPositiveDefinite as exc:
        raise SingularDesign(f"normal equations are singular: {exc}") from None
    return FitResult(
        coefficients=coef,
        intercept=False,
        fitted=x @ coef + design.offset,
        converged=True,
        iterations=0,
    )


def glm_irls(design: Design, max_iter: int = 100, tol: float = _IRLS_TOL) -> FitResult:
    """Newton iterations with step halving; stops when the score is flat."""
    x, y, w, offset = design.x, design.y, design.weights, design.offset
    coef = np.zeros(design.p)
    eta = offset.copy()
    nll = _neg_loglik(design, eta)
    for it in range(max_iter + 1):
        m = _mean_from_eta(design.family, eta)
        score = x.T @ (w * (y - m))
        if np.max(np.abs(score)) < tol:
            return FitResult(coef, False, m, True, it)
        if it == max_iter:
            break
        wv = w * _variance_from_mean(design.family, m)
        try:
            step = solve_spd((x * wv[:, None]).T @ x, score)
        except NotPositiveDefinite as exc:
            raise SingularDesign(f"information matrix is singular: {exc}") from None
        scale = 1.0
        for _ in range(40):
            cand = coef + scale * step
            cand_eta = x @ cand + offset
            cand_nll = _neg_loglik(design, cand_eta)
            if cand_nll <= nll + 1e-12:
                break
            scale *= 0.5
        else:
            raise NoConvergence("step halving failed to reduce the objective")
        coef, eta, nll = cand, cand_eta, cand_nll
        if design.family == "binomial" and np.max(np.abs(eta)) > _SEPARATION_BOUND:
            raise SeparationDetected(
                f"linear predictor exceeded {_SEPARATION_BOUND}; data look separated"
            )
    raise NoConvergence(f"score norm above {tol} after {max_iter} iterations")


class _Standardized:
    """Centered, population-sd-scaled covariates for the lasso."""

    def __init__(self, design: Design):
        self.design = design
        x = design.x
        self.center = x.mean(axis=0)
        sd = x.std(axis=0)
        if np.any(sd == 0.0):
            raise SingularDesign("constant covariate cannot be standardized")
        self.scale = sd
        self.xt = (x - self.center) / sd

    def intercept_only_mean(self) -> np.ndarray:
        d = self.design
        w, y, offset = d.weights, d.y, d.offset
        if d.family == "gaussian":
            b0 = float(w @ (y - offset)) / float(w.sum())
            return b0 + offset
        if d.family == "poisson":
            rate = float(w @ y) / float(w @ np.exp(offset))
            return rate * np.exp(offset)
        base = glm_irls(Design(np.ones((d.n, 1)), y, d.family, offset, w))
        return base.fitted

    def to_original(self, b0: float, beta_std: np.ndarray) -> tuple[float, np.ndarray]:
        slopes = beta_std / self.scale
        return b0 - float(self.center @ slopes), slopes


def lambda_grid(
    design: Design, n_points: int = 100, min_ratio: float = 1e-3
) -> np.ndarray:
    """Log-spaced descending penalties from the smallest all-zero value."""
    if n_points < 1:
        raise InvalidParameters("grid needs at least one point")
    if not 0.0 < min_ratio < 1.0:
        raise InvalidParameters("min_ratio must lie in (0, 1)")
    std = _Standardized(design)
    m0 = std.intercept_only_mean()
    resid = design.weights * (design.y - m0)
    lam_max = float(np.max(np.abs(std.xt.T @ resid))) / design.n
    if lam_max <= 0.0:
        raise InvalidParameters("response carries no signal to penalize against")
    # nudge past summation-order rounding so the boundary point stays all-zero
    lam_max *= 1.0 + 1e-13
    if n_points == 1:
        return np.array([lam_max])
    return np.geomspace(lam_max, min_ratio * lam_max, n_points)


def _soft(v: float, lam: float) -> float:
    return math.copysign(max(abs(v) - lam, 0.0), v)


def _cd_sweep(
    xt: np.ndarray,
    wxt: np.ndarray,
    col_w2: np.ndarray,
    wls: np.ndarray,
    wsum: float,
    lam: float,
    b0: float,
    beta: np.ndarray,
    r: np.ndarray,
    cols,
) -> tuple[float, float]:
    n = xt.shape[0]
    shift = float(wls @ r) / wsum
    b0 += shift
    r -= shift
    delta = abs(shift)
    for j in cols:
        if col_w2[j] == 0.0:
            continue
        rho = float(wxt[:, j] @ r) / n + col_w2[j] * beta[j]
        new = _soft(rho, lam) / col_w2[j]
        d = new - beta[j]
        if d != 0.0:
            beta[j] = new
            r -= xt[:, j] * d
            delta = max(delta, abs(d))
    return b0, delta


_REFINE_PERIOD = 25


def _wls_refine(xt, wxt, col_w2, wls, wsum, z, lam, beta):
    """Exact active-set solve of the weighted lasso subproblem.

    Seeds the sign pattern from the current iterate and alternates
    stationarity solves on the active columns (intercept unpenalized)
    with partial steps in the Lawson-Hanson style: a candidate that
    flips a sign is followed only to the first zero crossing, the
    crossing coordinates leave the pattern, and the solve repeats.
    An inconsistent stationarity system (possible once the pattern
    reaches the row count) means the sign-fixed objective falls
    without bound along the residual direction, so that direction is
    walked to the first sign wall instead. Every move strictly
    decreases the objective, so the pivots cannot cycle. Returns
    (b0, beta) only when the full KKT certificate holds well inside
    the outer tolerance, so a wrong pattern can never be accepted;
    None when the pivot budget or a stalled subsystem ends the
    attempt.
    """
    n, p = xt.shape
    sgn = np.sign(beta)
    cur = beta.copy()
    b0_cur = float(wls @ (z - xt @ cur)) / wsum
    cert_tol = 0.2 * _KKT_TOL
    last_added = -1
    for _ in range(8 * p + 32):
        act = np.flatnonzero(sgn)
        k = act.size
        cols = wxt[:, act]
        a = np.empty((k + 1, k + 1))
        a[:k, :k] = cols.T @ xt[:, act] / n
        a[:k, k] = a[k, :k] = cols.sum(axis=0) / n
        a[k, k] = wsum / n
        rhs = np.empty(k + 1)
        rhs[:k] = cols.T @ z / n - lam * sgn[act]
        rhs[k] = float(wls @ z) / n
        rhs_scale = 1.0 + float(np.max(np.abs(rhs)))
        try:
            sol = np.linalg.solve(a, rhs)
            if float(np.max(np.abs(a @ sol - rhs))) > 1e-12 * rhs_scale:
                sol = np.linalg.lstsq(a, rhs, rcond=None)[0]
        except np.linalg.LinAlgError:
            sol = np.linalg.lstsq(a, rhs, rcond=None)[0]
        resid = rhs - a @ sol
        if float(np.max(np.abs(resid))) > 1e-10 * rhs_scale:
            # inconsistent system, no stationary point exists; resid
            # spans the downhill null direction
            if k == 0:
                return None
            d = resid[:k]
            down = sgn[act] * d
            ratios = np.where(
                down < 0.0, (sgn[act] * cur[act]) / np.maximum(-down, 1e-300), np.inf
            )
            t = float(ratios.min())
            if not (0.0 < t < math.inf):
                return None
            cur[act] += t * d
            b0_cur += t * float(resid[k])
            drop = act[ratios <= t * (1.0 + 1e-12)]
            cur[drop] = 0.0
            sgn[drop] = 0.0
            continue
        cand = np.zeros(p)
        cand[act] = sol[:k]
        b0_cand = float(sol[k])
        viol = sgn[act] * cand[act]
        crossed = viol <= 0.0
        if k and bool(crossed.any()):
            num = sgn[act] * cur[act]
            den = num - viol
            steps = np.where(crossed & (den > 0.0), num / np.maximum(den, 1e-300), np.inf)
            t = float(steps.min())
            if t <= 0.0:
                # only a coordinate already at zero can force a zero
                # step; resolving it to the wrong sign means the
                # pattern is bad, so retract the most recent add
                bad = last_added
                if bad < 0 or sgn[bad] == 0.0 or sgn[bad] * cand[bad] > 0.0:
                    return None
                sgn[bad] = 0.0
                cur[bad] = 0.0
                last_added = -1
                continue
            if t < 1.0:
                cur += t * (cand - cur)
                b0_cur += t * (b0_cand - b0_cur)
            else:
                cur = cand.copy()
                b0_cur = b0_cand
            drop = act[steps <= t * (1.0 + 1e-12)]
            cur[drop] = 0.0
            sgn[drop] = 0.0
            continue
        cur = cand
        b0_cur = b0_cand
        r = z - b0_cand - xt[:, act] @ sol[:k]
        grad = wxt.T @ r / n
        slack = np.abs(grad) - lam
        slack[act] = -np.inf
        slack[col_w2 == 0.0] = -np.inf
        j = int(np.argmax(slack))
        if slack[j] > cert_tol and k < n:
            sgn[j] = math.copysign(1.0, grad[j])
            last_added = j
            continue
        # the certificate re-checks every KKT block before accepting
        act_err = float(np.max(np.abs(grad[act] - lam * sgn[act]))) if k else 0.0
        int_err = abs(float(wls @ r)) / n
        if slack[j] <= cert_tol and act_err <= cert_tol and int_err <= cert_tol:
            return b0_cand, cand
        return None
    return None


def _cd_solve(
    xt: np.ndarray,
    z: np.ndarray,
    wls: np.ndarray,
    lam: float,
    b0: float,
    beta: np.ndarray,
    max_passes: int,
) -> float:
    """Penalized weighted least squares, exact-first with a CD fallback.

    The warm-start sign pattern seeds a KKT-certified active-set solve,
    which lands immediately on the optimum for most steps of a penalty
    path. When certification fails, coordinate descent sweeps reshape
    the pattern, with further certification attempts every
    _REFINE_PERIOD sweeps, so slow sweep tails on correlated designs
    finish exactly instead of grinding to the sweep tolerance.
    """
    n, p = xt.shape
    wxt = wls[:, None] * xt
    col_w2 = (wxt * xt).sum(axis=0) / n
    wsum = float(wls.sum())
    refined = _wls_refine(xt, wxt, col_w2, wls, wsum, z, lam, beta)
    if refined is not None:
        b0_new, beta_new = refined
        beta[:] = beta_new
        return b0_new
    r = z - b0 - xt @ beta
    passes = 0
    next_refine = _REFINE_PERIOD
    while passes < max_passes:
        b0, delta = _cd_sweep(xt, wxt, col_w2, wls, wsum, lam, b0, beta, r, range(p))
        passes += 1
        if delta < _CD_TOL:
            return b0
        while passes < max_passes:
            active = np.flatnonzero(beta)
            b0, delta = _cd_sweep(xt, wxt, col_w2, wls, wsum, lam, b0, beta, r, active)
            passes += 1
            if delta < _CD_TOL:
                break
            if passes >= next_refine:
                next_refine += _REFINE_PERIOD
                refined = _wls_refine(xt, wxt, col_w2, wls, wsum, z, lam, beta)
                if refined is not None:
                    b0_new, beta_new = refined
                    beta[:] = beta_new
                    return b0_new
    refined = _wls_refine(xt, wxt, col_w2, wls, wsum, z, lam, beta)
    if refined is not None:
        b0_new, beta_new = refined
        beta[:] = beta_new
        return b0_new
    raise NoConvergence(f"coordinate descent exceeded {max_passes} passes")


def _kkt_violation(
    xt: np.ndarray, resid_w: np.ndarray, lam: float, beta: np.ndarray
) -> float:
    n = xt.shape[0]
    grad = xt.T @ resid_w / n
    worst = abs(float(resid_w.sum())) / n
    for j in range(len(beta)):
        if beta[j] == 0.0:
            worst = max(worst, abs(grad[j]) - lam)
        else:
            worst = max(worst, abs(grad[j] - lam * math.copysign(1.0, beta[j])))
    return worst


def lasso_cd(design: Design, lam_grid: np.ndarray) -> LassoResult:
    """Coordinate-descent solution path over a descending penalty grid."""
    lam_grid = np.asarray(lam_grid, dtype=float)
    if lam_grid.ndim != 1 or lam_grid.size == 0:
        raise InvalidParameters("penalty grid must be a nonempty vector")
    if np.any(lam_grid < 0) or np.any(np.diff(lam_grid) > 0):
        raise InvalidParameters("penalty grid must be nonnegative and descending")
    if design.n < 2:
        raise InvalidParameters("lasso needs at least two observations")
    std = _Standardized(design)
    xt = std.xt
    y, w, offset, family = design.y, design.weights, design.offset, design.family
    n, p = xt.shape

    path = np.zeros((lam_grid.size, p))
    intercepts = np.zeros(lam_grid.size)
    b0 = 0.0
    beta = np.zeros(p)
    for i, lam in enumerate(lam_grid):
        for _outer in range(100):
            eta_lin = b0 + xt @ beta
            eta = np.clip(eta_lin + offset, -_ETA_CAP, _ETA_CAP)
            m = _mean_from_eta(family, eta)
            resid_w = w * (y - m)
            if _kkt_violation(xt, resid_w, lam, beta) < _KKT_TOL:
                break
            v = np.maximum(_variance_from_mean(family, m), 1e-10)
            z = eta_lin + (y - m) / v
            b0 = _cd_solve(xt, z, w * v, lam, b0, beta, 1000)
        else:
            raise NoConvergence(
                f"penalized fit did not reach stationarity at lam={lam:.6g}"
            )
        intercepts[i], path[i] = std.to_original(b0, beta)
    return LassoResult(lam_grid=lam_grid, path=path, intercepts=intercepts)


def cv_select(
    design: Design, lam_grid: np.ndarray, k_folds: int, rng: RngStream
) -> LassoResult:
    """K-fold cross-validation with the one-standard-error rule.

    Folds come from a seeded shuffle.  The chosen penalty is the largest
    grid value whose mean validation deviance stays within one standard
    error of the minimum; ``support`` holds the nonzero slopes of the
    full-data fit at that penalty.
    """
    lam_grid = np.asarray(lam_grid, dtype=float)
    n = design.n
    if not 2 <= k_folds <= n:
        raise InvalidParameters(f"fold count must lie in [2, {n}], got {k_folds}")
    perm = rng.gen.permutation(n)
    folds = np.array_split(perm, k_folds)
    dev_obs = np.empty((n, lam_grid.size))
    for val_idx in folds:
        train = np.setdiff1d(perm, val_idx)
        sub = Design(
            design.x[train],
            design.y[train],
            design.family,
            design.offset[train],
            design.weights[train],
        )
        res = lasso_cd(sub, lam_grid)
        x_val = design.x[val_idx]
        for i in range(lam_grid.size):
            eta = np.clip(
                res.intercepts[i] + x_val @ res.path[i] + design.offset[val_idx],
                -_ETA_CAP,
                _ETA_CAP,
            )
            m = _mean_from_eta(design.family, eta)
            dev_obs[val_idx, i] = _unit_deviance(design.family, design.y[val_idx], m)
    w = design.weights
    if n >= 3 * k_folds:
        # standard error across fold-level means, folds-1 denominator
        fold_mean = np.empty((k_folds, lam_grid.size))
        fold_w = np.empty(k_folds)
        for fi, val_idx in enumerate(folds):
            fold_w[fi] = float(w[val_idx].sum())
            fold_mean[fi] = w[val_idx] @ dev_obs[val_idx] / fold_w[fi]
        cv_mean = fold_w @ fold_mean / float(fold_w.sum())
        cv_se = np.sqrt(
            (fold_w @ (fold_mean - cv_mean) ** 2 / float(fold_w.sum())) / (k_folds - 1)
        )
    else:
        # folds smaller than three observations are too noisy to
        # aggregate, so the error pools observations directly
        cv_mean = w @ dev_obs / float(w.sum())
        cv_se = np.sqrt((w @ (dev_obs - cv_mean) ** 2 / float(w.sum())) / (n - 1))

    i_min = int(np.argmin(cv_mean))
    cutoff = cv_mean[i_min] + cv_se[i_min]
    i_1se = int(np.flatnonzero(cv_mean <= cutoff)[0])
    full = lasso_cd(design, lam_grid)
    return LassoResult(
        lam_grid=lam_grid,
        path=full.path,
        intercepts=full.intercepts,
        cv_mean=cv_mean,
        cv_se=cv_se,
        lambda_min=float(lam_grid[i_min]),
        lambda_1se=float(lam_grid[i_1se]),
        support=np.flatnonzero(full.path[i_1se]),
    )
