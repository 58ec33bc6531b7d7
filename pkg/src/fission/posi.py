"""Post-selection inference on the inference part of fissioned data.

Covers confidence intervals for the projected coefficients of a selected
linear model (known and estimated noise scale), quasi-likelihood sandwich
intervals for selected GLMs, and the multiple-testing pipeline: BH
selection on the selection parts, per-signal and aggregate intervals
from the inference parts, randomized p-values for discrete nulls, and a
chi-square shortcut interval for the mean of selected Poisson signals.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyRejectionSet,
    InvalidParameters,
    NotPositiveDefinite,
    RankDeficientFullModel,
    SingularDesign,
    SingularHessian,
)
from .fitting import Design, _variance_from_mean, glm_irls
from .linalg import chisq_quantile, solve_spd, std_normal_cdf, std_normal_quantile
from .rng import RngStream
from .rules import GaussP1

__all__ = [
    "TARGETS",
    "SelectedModel",
    "CiTable",
    "SandwichPieces",
    "RejectionSet",
    "EstVarReport",
    "MultitestResult",
    "linear_ci",
    "linear_ci_estvar",
    "sandwich_ci",
    "bh_select",
    "by_ci",
    "fission_multitest",
    "randomized_pvalue",
    "poisson_aggregate_ci",
    "fdp",
    "fcr",
    "avg_ci_length",
    "fsr",
    "power_sign",
    "power_selected",
    "precision_selected",
    "regression_metrics",
]

TARGETS = ("beta_star", "beta_star_n", "projected_mean", "mu_bar", "mu_individual")

_CSV_HEADER = ["index", "estimate", "lower", "upper", "target", "level"]


@dataclass(frozen=True)
class SelectedModel:
    """Sorted, unique column indices with the matching design submatrix."""

    indices: tuple
    x_m: np.ndarray

    @staticmethod
    def from_columns(x: np.ndarray, indices) -> "SelectedModel":
        idx = [int(i) for i in indices]
        if len(set(idx)) != len(idx):
            raise InvalidParameters(f"selected indices must be unique: {idx}")
        if any(i < 0 or i >= x.shape[1] for i in idx):
            raise InvalidParameters(f"selected indices out of range: {idx}")
        idx = tuple(sorted(idx))
        return SelectedModel(indices=idx, x_m=x[:, list(idx)])


@dataclass
class CiTable:
    """Per-coordinate intervals with their target parameter and level."""

    indices: np.ndarray
    estimates: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    target: str
    level: float

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=int)
        self.estimates = np.asarray(self.estimates, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        n = self.indices.shape[0]
        for name in ("estimates", "lower", "upper"):
            if getattr(self, name).shape != (n,):
                raise InvalidParameters(f"{name} does not match the index column")
        if self.target not in TARGETS:
            raise InvalidParameters(f"unknown target label {self.target!r}")
        if not 0.0 < self.level < 1.0:
            raise InvalidParameters(f"level must lie in (0, 1), got {self.level}")
        if n and not np.all(
            (self.lower <= self.estimates) & (self.estimates <= self.upper)
        ):
            raise InvalidParameters("intervals must satisfy lower <= estimate <= upper")

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    def covers(self, targets) -> np.ndarray:
        targets = np.asarray(targets, dtype=float)
        return (self.lower <= targets) & (targets <= self.upper)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_CSV_HEADER)
            for i in range(len(self)):
                writer.writerow(
                    [
                        int(self.indices[i]),
                        repr(float(self.estimates[i])),
                        repr(float(self.lower[i])),
                        repr(float(self.upper[i])),
                        self.target,
                        repr(float(self.level)),
                    ]
                )


@dataclass
class SandwichPieces:
    """Hessian, score outer product, and the composed variance matrix."""

    h_hat: np.ndarray
    v_hat: np.ndarray
    variance: np.ndarray

    def __post_init__(self) -> None:
        for name in ("h_hat", "v_hat", "variance"):
            m = np.asarray(getattr(self, name), dtype=float)
            if not np.allclose(m, m.T, atol=1e-10):
                raise InvalidParameters(f"{name} must be symmetric")
            setattr(self, name, (m + m.T) / 2.0)
        if np.min(np.linalg.eigvalsh(self.h_hat)) <= 0.0:
            raise SingularHessian("hessian piece is not positive definite")
        for name in ("v_hat", "variance"):
            if np.min(np.linalg.eigvalsh(getattr(self, name))) < -1e-10:
                raise InvalidParameters(f"{name} must be positive semidefinite")


@dataclass
class RejectionSet:
    """Rejected hypothesis indices with the p-values that produced them."""

    rejected: np.ndarray
    pvalues: np.ndarray
    level: float

    def __post_init__(self) -> None:
        self.rejected = np.asarray(self.rejected, dtype=int)
        self.pvalues = np.asarray(self.pvalues, dtype=float)
        n = self.pvalues.shape[0]
        if self.rejected.size and (self.rejected.min() < 0 or self.rejected.max() >= n):
            raise InvalidParameters("rejected indices outside the hypothesis range")

    def to_csv(self, path) -> None:
        """One row per rejected index; its p-value sits in the estimate column."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_CSV_HEADER)
            for i in self.rejected:
                writer.writerow(
                    [
                        int(i),
                        repr(float(self.pvalues[i])),
                        "",
                        "",
                        "rejection",
                        repr(float(self.level)),
                    ]
                )


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


def _check_tau_alpha(tau: float, alpha: float) -> None:
    if not (tau > 0 and math.isfinite(tau)):
        raise InvalidParameters(f"tau must be positive and finite, got {tau}")
    if not 0.0 < alpha < 1.0:
        raise InvalidParameters(f"alpha must lie in (0, 1), got {alpha}")


def linear_ci(
    g_y: np.ndarray,
    x_m: np.ndarray,
    sigma,
    tau: float,
    alpha: float,
    indices=None,
    target: str = "beta_star",
) -> CiTable:
    """Intervals for the projected coefficients of the selected columns.

    The estimate is least squares of the inference part on ``x_m``; the
    variance is (1 + 1/tau^2) (X'X)^-1 X' Sigma X (X'X)^-1.  ``sigma``
    may be a full matrix, a diagonal vector, or a scalar multiple of I.
    """
    _check_tau_alpha(tau, alpha)
    g_y = np.asarray(g_y, dtype=float)
    x_m = np.asarray(x_m, dtype=float)
    n = x_m.shape[0]
    cov = _as_cov(sigma, n)
    xtx = x_m.T @ x_m
    try:
        est = solve_spd(xtx, x_m.T @ g_y)
        mid = solve_spd(xtx, x_m.T @ cov @ x_m)
        sandwich = solve_spd(xtx, mid.T).T
    except NotPositiveDefinite as exc:
        raise SingularDesign(f"selected columns are collinear: {exc}") from None
    var = (1.0 + tau**-2) * np.diag(sandwich)
    if np.any(var < -1e-12):
        raise InvalidParameters("covariance produced negative variances; not PSD")
    half = std_normal_quantile(1 - alpha / 2) * np.sqrt(np.maximum(var, 0.0))
    if indices is None:
        indices = np.arange(x_m.shape[1])
    return CiTable(
        indices=np.asarray(indices),
        estimates=est,
        lower=est - half,
        upper=est + half,
        target=target,
        level=1 - alpha,
    )


@dataclass
class EstVarReport:
    """Unknown-variance intervals plus the fission draw that produced them.

    ``residual_df`` is the full-model residual degrees of freedom behind
    the noise-scale estimate; small values flag a fragile estimate.
    """

    table: CiTable
    sigma_hat: float
    residual_df: int
    f_part: np.ndarray
    g_part: np.ndarray


def linear_ci_estvar(
    y: np.ndarray,
    x_full: np.ndarray,
    x_m: np.ndarray,
    tau: float,
    alpha: float,
    rng: RngStream,
    indices=None,
) -> EstVarReport:
    """Estimate the noise scale from the full model, then fission and infer.

    The same RngStream seed reproduces the same fission draw, so a caller
    that selected columns on ``f_part`` from an identically-seeded stream
    gets intervals consistent with that selection.
    """
    _check_tau_alpha(tau, alpha)
    y = np.asarray(y, dtype=float)
    x_full = np.asarray(x_full, dtype=float)
    n, p = x_full.shape
    if n <= p:
        raise RankDeficientFullModel(f"residual variance needs n > p, got n={n}, p={p}")
    try:
        beta_full = solve_spd(x_full.T @ x_full, x_full.T @ y)
    except NotPositiveDefinite as exc:
        raise RankDeficientFullModel(f"full design is rank deficient: {exc}") from None
    resid = y - x_full @ beta_full
    residual_df = n - p
    sigma_hat = math.sqrt(float(resid @ resid) / residual_df)

    z = rng.gen.standard_normal(n)
    f_part = y + sigma_hat * tau * z
    g_part = y - (sigma_hat / tau) * z

    x_m = np.asarray(x_m, dtype=float)
    xtx = x_m.T @ x_m
    try:
        est = solve_spd(xtx, x_m.T @ g_part)
        xtx_inv_diag = np.diag(solve_spd(xtx, np.eye(x_m.shape[1])))
    except NotPositiveDefinite as exc:
        raise SingularDesign(f"selected columns are collinear: {exc}") from None
    half = (
        sigma_hat
        * std_normal_quantile(1 - alpha / 2)
        * np.sqrt((1.0 + tau**-2) * xtx_inv_diag)
    )
    if indices is None:
        indices = np.arange(x_m.shape[1])
    table = CiTable(
        indices=np.asarray(indices),
        estimates=est,
        lower=est - half,
        upper=est + half,
        target="beta_star",
        level=1 - alpha,
    )
    return EstVarReport(table, sigma_hat, residual_df, f_part, g_part)


def sandwich_ci(
    design: Design,
    m_indices,
    alpha: float,
    correction: str = "none",
    irls_tol: float = 1e-10,
) -> tuple[SandwichPieces, CiTable]:
    """Quasi-likelihood sandwich intervals for the selected GLM columns.

    ``design`` carries the inference parts as response (with any offset,
    e.g. log keep-rate for thinned Poisson data).  With the "hc-df"
    correction, half-widths grow by sqrt(n / (n - |M|)).
    """
    if correction not in ("none", "hc-df"):
        raise InvalidParameters(f"unknown correction {correction!r}")
    if not 0.0 < alpha < 1.0:
        raise InvalidParameters(f"alpha must lie in (0, 1), got {alpha}")
    model = SelectedModel.from_columns(design.x, m_indices)
    sub = Design(model.x_m, design.y, design.family, design.offset, design.weights)
    try:
        fit = glm_irls(sub, tol=irls_tol)
    except SingularDesign as exc:
        raise SingularHessian(str(exc)) from None
    m = fit.fitted
    w = design.weights
    # canonical links: d mean / d eta equals the variance function, so the
    # score contribution of row i collapses to x_i * w_i * (y_i - m_i)
    v = _variance_from_mean(design.family, m)
    h_hat = (model.x_m * (w * v)[:, None]).T @ model.x_m
    score_rows = model.x_m * (w * (design.y - m))[:, None]
    v_hat = score_rows.T @ score_rows
    try:
        half_inv = solve_spd(h_hat, v_hat)
        variance = solve_spd(h_hat, half_inv.T).T
    except NotPositiveDefinite as exc:
        raise SingularHessian(f"hessian not invertible: {exc}") from None
    variance = (variance + variance.T) / 2.0
    pieces = SandwichPieces(h_hat=h_hat, v_hat=v_hat, variance=variance)

    half = std_normal_quantile(1 - alpha / 2) * np.sqrt(np.diag(pieces.variance))
    if correction == "hc-df":
        n, m_size = design.n, len(model.indices)
        if n <= m_size:
            raise InvalidParameters("df inflation needs n > |M|")
        half = half * math.sqrt(n / (n - m_size))
    table = CiTable(
        indices=np.asarray(model.indices),
        estimates=fit.coefficients,
        lower=fit.coefficients - half,
        upper=fit.coefficients + half,
        target="beta_star_n",
        level=1 - alpha,
    )
    return pieces, table


def bh_select(pvalues: np.ndarray, q: float) -> RejectionSet:
    """Step-up multiple testing; rejects the k* smallest p-values."""
    p = np.asarray(pvalues, dtype=float)
    if p.ndim != 1 or p.size == 0:
        raise InvalidParameters("p-values must form a nonempty vector")
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise InvalidParameters("p-values must lie in [0, 1]")
    if not 0.0 <= q <= 1.0:
        raise InvalidParameters(f"target rate must lie in [0, 1], got {q}")
    n = p.size
    order = np.argsort(p, kind="stable")
    thresholds = (np.arange(1, n + 1) * q) / n
    passing = np.flatnonzero(p[order] <= thresholds)
    k_star = int(passing[-1]) + 1 if passing.size else 0
    return RejectionSet(
        rejected=np.sort(order[:k_star]), pvalues=p, level=float(q)
    )


def by_ci(
    y_selected: np.ndarray,
    n_total: int,
    sigma: float,
    alpha: float,
    indices=None,
) -> CiTable:
    """Selection-adjusted intervals at level |R| * alpha / n per signal."""
    y_selected = np.asarray(y_selected, dtype=float)
    r = y_selected.shape[0]
    if r == 0:
        raise EmptyRejectionSet("no selected signals to cover")
    if sigma <= 0:
        raise InvalidParameters(f"sigma must be positive, got {sigma}")
    if not 0.0 < alpha < 1.0:
        raise InvalidParameters(f"alpha must lie in (0, 1), got {alpha}")
    if n_total < r:
        raise InvalidParameters("total hypothesis count below the selected count")
    beta = r * alpha / n_total
    half = std_normal_quantile(1 - beta / 2) * sigma
    if indices is None:
        indices = np.arange(r)
    return CiTable(
        indices=np.asarray(indices),
        estimates=y_selected,
        lower=y_selected - half,
        upper=y_selected + half,
        target="mu_individual",
        level=1 - alpha,
    )


@dataclass
class MultitestResult:
    """Selection from the f-parts plus intervals from the g-parts.

    ``aggregate`` is (estimate, lower, upper) for the mean signal over
    the rejection set, or None when nothing was rejected.
    """

    rejections: RejectionSet
    per_signal: CiTable
    aggregate: tuple | None
    f_parts: np.ndarray
    g_parts: np.ndarray


def fission_multitest(
    y: np.ndarray,
    sigma: float,
    tau: float,
    alpha: float,
    q: float,
    rng: RngStream,
    two_sided: bool = False,
) -> MultitestResult:
    """Gaussian multiple testing: select on f-parts, cover from g-parts.

    P-values test each mean against zero, one-sided toward positive
    signals by default (``two_sided`` flips to the symmetric version).
    """
    _check_tau_alpha(tau, alpha)
    if sigma <= 0:
        raise InvalidParameters(f"sigma must be positive, got {sigma}")
    y = np.asarray(y, dtype=float)
    out = GaussP1(tau=tau, var=sigma**2).fission(y, rng)
    f_parts = np.asarray(out.f_part, dtype=float)
    g_parts = np.asarray(out.g_part, dtype=float)

    scaled = f_parts / (sigma * math.sqrt(1.0 + tau**2))
    if two_sided:
        pvals = 2.0 * (1.0 - std_normal_cdf(np.abs(scaled)))
    else:
        pvals = 1.0 - std_normal_cdf(scaled)
    rejections = bh_select(pvals, q)
    sel = rejections.rejected

    half = std_normal_quantile(1 - alpha / 2) * sigma * math.sqrt(1.0 + tau**-2)
    per_signal = CiTable(
        indices=sel,
        estimates=g_parts[sel],
        lower=g_parts[sel] - half,
        upper=g_parts[sel] + half,
        target="mu_individual",
        level=1 - alpha,
    )
    if sel.size:
        center = float(np.mean(g_parts[sel]))
        agg_half = (
            std_normal_quantile(1 - alpha / 2)
            * sigma
            * math.sqrt((1.0 + tau**-2) / sel.size)
        )
        aggregate = (center, center - agg_half, center + agg_half)
    else:
        aggregate = None
    return MultitestResult(rejections, per_signal, aggregate, f_parts, g_parts)


def randomized_pvalue(y, null, rng: RngStream) -> float:
    """Uniformized tail statistic U F(y) + (1-U) F(y-) for a discrete null.

    Exactly Uniform(0, 1) when ``y`` follows the null.  Upper-tail tests
    should use one minus this value.  ``null`` needs a ``cdf`` method; a
    ``cdf_left`` method supplies F(y-), defaulting to ``cdf`` itself for
    continuous laws.
    """
    f_hi = float(null.cdf(y))
    cdf_left = getattr(null, "cdf_left", None)
    f_lo = float(cdf_left(y)) if cdf_left is not None else f_hi
    u = float(rng.gen.uniform())
    return f_hi * u + (1.0 - u) * f_lo


def poisson_aggregate_ci(g_parts: np.ndarray, p: float, alpha: float) -> tuple:
    """Chi-square shortcut interval for the mean signal over the rejections.

    The g-parts are thinned-away counts with mean (1-p) times the signal,
    so the classical Poisson-sum interval is rescaled by 1/(1-p).
    """
    g = np.asarray(g_parts, dtype=float)
    if g.size == 0:
        raise EmptyRejectionSet("aggregate interval needs at least one signal")
    if np.any(g < 0) or np.any(g != np.floor(g)):
        raise InvalidParameters("g-parts must be nonnegative integers")
    if not 0.0 < p < 1.0:
        raise InvalidParameters(f"thinning probability must lie in (0, 1), got {p}")
    if not 0.0 < alpha < 1.0:
        raise InvalidParameters(f"alpha must lie in (0, 1), got {alpha}")
    total = float(g.sum())
    scale = 1.0 / (2.0 * g.size * (1.0 - p))
    lower = 0.0 if total == 0 else scale * chisq_quantile(alpha / 2, 2.0 * total)
    upper = scale * chisq_quantile(1 - alpha / 2, 2.0 * total + 2.0)
    return lower, upper


def fdp(rejected, nonnull_mask) -> float:
    """Share of rejections that hit true nulls; 0 when nothing is rejected."""
    rejected = np.asarray(rejected, dtype=int)
    nonnull_mask = np.asarray(nonnull_mask, dtype=bool)
    if rejected.size == 0:
        return 0.0
    return float(np.sum(~nonnull_mask[rejected])) / max(rejected.size, 1)


def fcr(table: CiTable, targets) -> float:
    """Share of intervals missing their target, guarded denominator."""
    if len(table) == 0:
        return 0.0
    return float(np.sum(~table.covers(targets))) / max(len(table), 1)


def avg_ci_length(table: CiTable) -> float:
    """Mean interval width; NaN for an empty table."""
    if len(table) == 0:
        return float("nan")
    return float(np.mean(table.widths()))


def fsr(table: CiTable, beta_true) -> float:
    """Wrong-direction claims among intervals that exclude zero."""
    beta_true = np.asarray(beta_true, dtype=float)
    if len(table) == 0:
        return 0.0
    truth = beta_true[table.indices]
    wrong = ((truth < 0) & (table.lower > 0)) | ((truth > 0) & (table.upper < 0))
    claiming = (table.lower > 0) | (table.upper < 0)
    return float(np.sum(wrong)) / max(int(np.sum(claiming)), 1)


def power_sign(table: CiTable, beta_true) -> float:
    """Positive signals confidently reported positive, over all positives."""
    beta_true = np.asarray(beta_true, dtype=float)
    denom = max(int(np.sum(beta_true > 0)), 1)
    if len(table) == 0:
        return 0.0
    truth = beta_true[table.indices]
    hits = int(np.sum((truth > 0) & (table.lower > 0)))
    return hits / denom


def power_selected(selected, true_support) -> float:
    """Share of truly nonzero coordinates that made it into the selection."""
    selected = set(int(i) for i in np.asarray(selected, dtype=int))
    support = set(int(i) for i in np.asarray(true_support, dtype=int))
    return len(selected & support) / max(len(support), 1)


def precision_selected(selected, true_support) -> float:
    """Share of selected coordinates that are truly nonzero."""
    selected = set(int(i) for i in np.asarray(selected, dtype=int))
    support = set(int(i) for i in np.asarray(true_support, dtype=int))
    return len(selected & support) / max(len(selected), 1)


def regression_metrics(table: CiTable, selected, beta_true, targets) -> dict:
    """Per-trial metric bundle for the regression pipelines."""
    support = np.flatnonzero(np.asarray(beta_true) != 0)
    return {
        "fcr": fcr(table, targets),
        "avg_ci_length": avg_ci_length(table),
        "fsr": fsr(table, beta_true),
        "power_sign": power_sign(table, beta_true),
        "power_selected": power_selected(selected, support),
        "precision_selected": precision_selected(selected, support),
    }
