"""Simulation harness comparing fission, splitting, and double use.

Seven experiment families reproduce the reference studies: two linear
model designs (a small fixed design with one high-leverage row, and a
wide design with optionally Toeplitz-correlated covariates), Poisson
and logistic regression with lasso selection, signal detection on a
spatial grid for Gaussian and Poisson observations, and trend-filter
band construction over a noise-by-volatility grid.

Every trial draws from its own counter-keyed stream, so results are
identical for any degree of parallelism and any thread count. A trial
whose inference-stage fit degenerates (singular selected design, IRLS
failure) contributes an empty interval table: selection metrics still
count, coverage metrics follow the guarded-denominator conventions.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import MISSING, dataclass, fields

import numpy as np

from .dists import Poisson
from .errors import (
    ConfigError,
    InvalidParameters,
    NoConvergence,
    RankDeficientBasis,
    SingularBasis,
    SingularDesign,
    SingularHessian,
)
from .fitting import Design, cv_select, lambda_grid
from .linalg import chisq_quantile, std_normal_cdf, std_normal_quantile, t_quantile
from .posi import (
    CiTable,
    avg_ci_length,
    bh_select,
    fcr,
    fdp,
    fission_multitest,
    linear_ci,
    poisson_aggregate_ci,
    power_selected,
    randomized_pvalue,
    regression_metrics,
    sandwich_ci,
)
from .rng import RngStream
from .rules import BernoulliP2, GaussP1, PoissonP1
from .trendfilter import (
    falling_factorial_basis,
    knot_select,
    pointwise_band,
    uniform_band,
)

__all__ = [
    "EXPERIMENTS",
    "METHODS",
    "ExperimentConfig",
    "MetricsSummary",
    "SimResult",
    "build_config",
    "parse_config_text",
    "read_config_file",
    "run",
    "summarize",
    "write_config_echo",
    "write_summary_csv",
    "write_trials_csv",
]

EXPERIMENTS = (
    "linreg_leverage",
    "linreg_indep",
    "glm_poisson",
    "glm_logistic",
    "multitest_gauss",
    "multitest_poisson",
    "trendfilter_grid",
)
METHODS = ("fission", "split", "full_twice")

# tau so large the variance inflation (1 + tau^-2) rounds to exactly 1.0,
# which turns the fission interval formulas into their classical versions
_NO_FISSION_TAU = 1e12

_TOEPLITZ_BLOCK = 20
_LASSO_GRID_POINTS = 100
_CV_FOLDS = 10

_REGRESSION_COLUMNS = (
    "fcr",
    "avg_ci_length",
    "fsr",
    "power_sign",
    "power_selected",
    "precision_selected",
    "n_selected",
    "n_intervals",
)
_MULTITEST_COLUMNS = (
    "fdr",
    "power_selected",
    "miscoverage",
    "aggregate_ci_length",
    "fcr",
    "avg_ci_length",
    "n_rejected",
)
_TREND_COLUMNS = (
    "fcr",
    "avg_ci_length",
    "simult_type1",
    "uniform_ci_length",
    "n_knots",
)

_COLUMNS = {
    "linreg_leverage": _REGRESSION_COLUMNS,
    "linreg_indep": _REGRESSION_COLUMNS,
    "glm_poisson": _REGRESSION_COLUMNS,
    "glm_logistic": _REGRESSION_COLUMNS,
    "multitest_gauss": _MULTITEST_COLUMNS,
    "multitest_poisson": _MULTITEST_COLUMNS,
    "trendfilter_grid": _TREND_COLUMNS,
}

# thinning and flip rules need a probability; the Gaussian families read
# tau as the noise-to-signal SD ratio
_PROBABILITY_TAU = ("glm_poisson", "glm_logistic", "multitest_poisson")

# splitting needs multiple rows per unit of inference, which the grid
# and time-series problems do not have
_SPLITTABLE = ("linreg_leverage", "linreg_indep", "glm_poisson", "glm_logistic")

_DEFAULTS = {
    "linreg_leverage": dict(
        n=16, p=20, s_delta=0.2, gamma=4.0, rho=0.0, tau=1.0, q=0.2,
        alpha=0.2, sigma=1.0, trials=500,
        methods=("fission", "split", "full_twice"),
    ),
    "linreg_indep": dict(
        n=1000, p=100, s_delta=0.2, gamma=0.0, rho=0.0, tau=1.0, q=0.2,
        alpha=0.2, sigma=1.0, trials=500,
        methods=("fission", "split", "full_twice"),
    ),
    "glm_poisson": dict(
        n=16, p=20, s_delta=0.2, gamma=4.0, rho=0.0, tau=0.5, q=0.2,
        alpha=0.2, sigma=1.0, trials=500,
        methods=("fission", "split", "full_twice"),
    ),
    "glm_logistic": dict(
        n=1000, p=100, s_delta=0.5, gamma=0.0, rho=0.0, tau=0.2, q=0.2,
        alpha=0.2, sigma=1.0, trials=500,
        methods=("fission", "split", "full_twice"),
    ),
    "multitest_gauss": dict(
        n=25, p=2, s_delta=2.0, gamma=0.0, rho=0.0, tau=0.5, q=0.2,
        alpha=0.2, sigma=1.0, trials=250, methods=("fission", "full_twice"),
    ),
    "multitest_poisson": dict(
        n=25, p=2, s_delta=2.0, gamma=0.0, rho=0.0, tau=0.5, q=0.2,
        alpha=0.2, sigma=1.0, trials=250, methods=("fission", "full_twice"),
    ),
    "trendfilter_grid": dict(
        n=200, p=1, s_delta=0.0, gamma=0.0, rho=0.0, tau=1.0, q=0.2,
        alpha=0.2, sigma=0.05, trials=500, methods=("fission", "full_twice"),
    ),
}

_INT_KEYS = ("n", "p", "trials", "seed", "order", "n_lambdas")
_FLOAT_KEYS = (
    "s_delta", "gamma", "rho", "tau", "q", "alpha", "sigma", "p_knot", "radius",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved settings for one simulation study.

    ``tau`` is the fission tuning knob: the added-noise SD ratio for
    Gaussian data, the keep probability for Poisson thinning, and the
    flip probability for Bernoulli responses. For the grid experiments
    ``n`` is the grid side; for trend filtering, the series length.
    """

    experiment: str
    n: int
    p: int
    s_delta: float
    gamma: float
    rho: float
    tau: float
    q: float
    alpha: float
    sigma: float
    trials: int
    seed: int
    methods: tuple
    p_knot: float = 0.05
    order: int = 1
    n_lambdas: int = 20
    radius: float = 30.0

    def __post_init__(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(
                f"experiment must be one of {', '.join(EXPERIMENTS)}, "
                f"got {self.experiment!r}"
            )
        if self.trials < 1:
            raise ConfigError(f"trials must be at least 1, got {self.trials}")
        if not 0 <= self.seed <= 2**64 - 1:
            raise ConfigError("seed must fit in 64 bits")
        if not self.methods:
            raise ConfigError("methods must name at least one method")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(
                    f"methods entries must come from {', '.join(METHODS)}, got {m!r}"
                )
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods must not repeat")
        if "split" in self.methods and self.experiment not in _SPLITTABLE:
            raise ConfigError(
                f"split is not defined for {self.experiment}: there is no "
                "row-wise half to hold out"
            )
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 < self.q < 1.0:
            raise ConfigError(f"q must lie in (0, 1), got {self.q}")
        if self.experiment in _PROBABILITY_TAU:
            if not 0.0 < self.tau < 1.0:
                raise ConfigError(
                    f"tau is a probability for {self.experiment} and must lie "
                    f"in (0, 1), got {self.tau}"
                )
        elif not (self.tau > 0 and math.isfinite(self.tau)):
            raise ConfigError(f"tau must be positive and finite, got {self.tau}")
        if self.sigma <= 0 or not math.isfinite(self.sigma):
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.experiment in ("linreg_leverage", "glm_poisson"):
            if self.n < 6:
                raise ConfigError(f"n must be at least 6, got {self.n}")
            if self.p < 18:
                raise ConfigError(
                    f"{self.experiment} places signal on features 1, 16, 17, 18 "
                    f"and needs p >= 18, got {self.p}"
                )
            if self.gamma <= 0:
                raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.experiment in ("linreg_indep", "glm_logistic"):
            if self.p < 100:
                raise ConfigError(
                    f"{self.experiment} places signal on features up to 100 "
                    f"and needs p >= 100, got {self.p}"
                )
            if self.n < 4:
                raise ConfigError(f"n must be at least 4, got {self.n}")
        if self.experiment == "linreg_indep":
            if not -1.0 < self.rho < 1.0:
                raise ConfigError(f"rho must lie in (-1, 1), got {self.rho}")
            if self.rho != 0.0 and self.p % _TOEPLITZ_BLOCK != 0:
                raise ConfigError(
                    f"correlated covariates use {_TOEPLITZ_BLOCK}-wide Toeplitz "
                    f"blocks, so p must be a multiple of {_TOEPLITZ_BLOCK}"
                )
        if self.experiment.startswith("multitest"):
            if self.n < 2:
                raise ConfigError(f"grid side must be at least 2, got {self.n}")
            if self.radius <= 0:
                raise ConfigError(f"radius must be positive, got {self.radius}")
            if self.s_delta < 0:
                raise ConfigError(
                    f"s_delta is the non-null mean shift and must be "
                    f"nonnegative, got {self.s_delta}"
                )
        if self.experiment == "trendfilter_grid":
            if self.order < 0:
                raise ConfigError(f"order must be nonnegative, got {self.order}")
            if self.n < self.order + 2:
                raise ConfigError(
                    f"series length must exceed order + 1, got n={self.n}"
                )
            if not 0.0 <= self.p_knot <= 1.0:
                raise ConfigError(f"p_knot must lie in [0, 1], got {self.p_knot}")
            if self.n_lambdas < 2:
                raise ConfigError(
                    f"n_lambdas must be at least 2, got {self.n_lambdas}"
                )


def parse_config_text(text: str) -> dict:
    """Flat key=value lines; '#' starts a comment, blanks are skipped."""
    mapping = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value in {raw!r}")
        if key in mapping:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        mapping[key] = value
    return mapping


def read_config_file(path) -> dict:
    try:
        with open(path) as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None


def build_config(experiment: str, mapping=None, **overrides) -> ExperimentConfig:
    """Resolve defaults, file values, then keyword overrides, in that order.

    ``mapping`` holds raw strings from a config file; keyword overrides
    (CLI flags) are already typed. Unknown keys raise ConfigError.
    """
    if experiment not in EXPERIMENTS:
        raise ConfigError(
            f"experiment must be one of {', '.join(EXPERIMENTS)}, got {experiment!r}"
        )
    values = dict(_DEFAULTS[experiment])
    values["seed"] = 0
    values.update(
        {
            f.name: f.default
            for f in fields(ExperimentConfig)
            if f.name not in values and f.default is not MISSING
        }
    )
    for key, raw in (mapping or {}).items():
        if key == "experiment":
            if raw != experiment:
                raise ConfigError(
                    f"config file names experiment {raw!r} but {experiment!r} "
                    "was requested"
                )
            continue
        if key == "methods":
            values["methods"] = tuple(
                part.strip() for part in raw.split(",") if part.strip()
            )
            continue
        if key in _INT_KEYS:
            try:
                values[key] = int(raw)
            except ValueError:
                raise ConfigError(f"{key} must be an integer, got {raw!r}") from None
            continue
        if key in _FLOAT_KEYS:
            try:
                values[key] = float(raw)
            except ValueError:
                raise ConfigError(f"{key} must be a number, got {raw!r}") from None
            continue
        raise ConfigError(f"unknown config key {key!r}")
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in values:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value
    return ExperimentConfig(experiment=experiment, **values)


@dataclass(frozen=True)
class MetricsSummary:
    """Per-method means and Monte Carlo standard errors, one row per
    (method, metric): (method, metric, mean, mc_se, n_used)."""

    experiment: str
    columns: tuple
    rows: tuple


@dataclass(frozen=True)
class SimResult:
    config: ExperimentConfig
    columns: tuple
    trial_rows: tuple
    summary: MetricsSummary


def _empty_table(target: str, level: float) -> CiTable:
    z = np.zeros(0)
    return CiTable(
        indices=np.zeros(0, dtype=int), estimates=z, lower=z, upper=z,
        target=target, level=level,
    )


def _leverage_design(n, p, gamma, gen, binary_cols: bool) -> np.ndarray:
    base = gen.standard_normal((n - 1, p))
    if binary_cols:
        base[:, :2] = gen.integers(0, 2, size=(n - 1, 2)).astype(float)
    lev = gamma * np.max(np.abs(base), axis=0)
    return np.vstack([base, lev[None, :]])


def _toeplitz_design(n, p, rho, gen) -> np.ndarray:
    z = gen.standard_normal((n, p))
    if rho == 0.0:
        return z
    d = _TOEPLITZ_BLOCK
    block = rho ** np.abs(np.subtract.outer(np.arange(d), np.arange(d)))
    chol = np.linalg.cholesky(block)
    for start in range(0, p, d):
        z[:, start : start + d] = z[:, start : start + d] @ chol.T
    return z


def _binary_normal_design(n, p, gen) -> np.ndarray:
    x = gen.standard_normal((n, p))
    x[:, :2] = gen.integers(0, 2, size=(n, 2)).astype(float)
    return x


def _beta_leverage(p, s_delta) -> np.ndarray:
    beta = np.zeros(p)
    beta[[0, 15, 16, 17]] = s_delta * np.array([1.0, 1.0, -1.0, 1.0])
    return beta


def _beta_wide(p, s_delta, tail_value) -> np.ndarray:
    beta = np.zeros(p)
    head = [0] + list(range(2, 22))
    beta[head] = s_delta
    beta[91:100] = s_delta * tail_value
    return beta


def _lasso_support(x, resp, family, rng, offset=None) -> np.ndarray:
    """Cross-validated lasso support; empty when the fit degenerates.

    Degenerate cases (constant response, a constant covariate inside a
    fold, IRLS blowup on tiny samples) select nothing rather than abort
    the trial, mirroring how an analyst would move on.
    """
    try:
        design = Design(x, resp, family, offset)
        grid = lambda_grid(design, _LASSO_GRID_POINTS)
        res = cv_select(design, grid, min(_CV_FOLDS, design.n), rng)
    except (InvalidParameters, SingularDesign, NoConvergence):
        return np.zeros(0, dtype=int)
    return res.support


def _projected_target(x_m, mu_rows) -> np.ndarray:
    return np.linalg.solve(x_m.T @ x_m, x_m.T @ mu_rows)


def _classical_linear_ci(resp, x_m, alpha, indices) -> CiTable:
    """OLS refit with t intervals and the residual variance estimate.

    The baselines that reuse raw data mimic a textbook analysis, so the
    noise scale is estimated as RSS / (n - |M|) rather than plugged in.
    Requires at least one residual degree of freedom.
    """
    n, k = x_m.shape
    if n <= k:
        raise SingularDesign(f"{k} columns leave no residual dof in {n} rows")
    gram_inv = np.linalg.inv(x_m.T @ x_m)
    est = gram_inv @ (x_m.T @ resp)
    resid = resp - x_m @ est
    scale = math.sqrt(float(resid @ resid) / (n - k))
    half = t_quantile(1.0 - alpha / 2.0, n - k) * scale * np.sqrt(np.diag(gram_inv))
    return CiTable(
        indices=indices, estimates=est, lower=est - half, upper=est + half,
        target="beta_star", level=1.0 - alpha,
    )


_ETA_CAP = 500.0


def _glm_projection(x_m, mean_resp, family) -> np.ndarray:
    """Population working-model coefficients: IRLS run on the true means.

    Solves sum_i x_i (mu_i - m_b(x_i)) = 0 for the canonical link, which
    is the KL projection of the data-generating means onto the selected
    working model. The response here is a mean vector, not draws, so the
    integer-count validation in Design does not apply.
    """
    x_m = np.asarray(x_m, dtype=float)
    mu = np.asarray(mean_resp, dtype=float)
    beta = np.zeros(x_m.shape[1])
    for _ in range(200):
        eta = np.clip(x_m @ beta, -_ETA_CAP, _ETA_CAP)
        if family == "poisson":
            m = np.exp(eta)
            v = m
        else:
            m = 1.0 / (1.0 + np.exp(-eta))
            v = m * (1.0 - m)
        v = np.maximum(v, 1e-12)
        step = np.linalg.solve((x_m * v[:, None]).T @ x_m, x_m.T @ (mu - m))
        beta = beta + step
        if np.max(np.abs(step)) <= 1e-11 * (1.0 + np.max(np.abs(beta))):
            return beta
    raise NoConvergence("population projection did not converge")


def _regression_row(trial, method, table, selected, beta, targets) -> dict:
    row = {
        "trial": trial,
        "method": method,
        "n_selected": float(len(selected)),
        "n_intervals": float(len(table)),
    }
    row.update(regression_metrics(table, selected, beta, targets))
    return row


def _linreg_trial(cfg: ExperimentConfig, trial: int) -> list:
    rng = RngStream(cfg.seed).substream(trial)
    gen = rng.gen
    if cfg.experiment == "linreg_leverage":
        x = _leverage_design(cfg.n, cfg.p, cfg.gamma, gen, binary_cols=False)
        beta = _beta_leverage(cfg.p, cfg.s_delta)
    else:
        x = _toeplitz_design(cfg.n, cfg.p, cfg.rho, gen)
        beta = _beta_wide(cfg.p, cfg.s_delta, -1.0)
    mu = x @ beta
    y = mu + cfg.sigma * gen.standard_normal(cfg.n)

    rows = []
    for method in cfg.methods:
        if method == "fission":
            parts = GaussP1(tau=cfg.tau, var=cfg.sigma**2).fission(y, rng)
            selected = _lasso_support(x, parts.f_part, "gaussian", rng)
            x_rows, resp, mu_rows = x, parts.g_part, mu
        elif method == "split":
            perm = gen.permutation(cfg.n)
            first, second = perm[: cfg.n // 2], perm[cfg.n // 2 :]
            selected = _lasso_support(x[first], y[first], "gaussian", rng)
            x_rows, resp, mu_rows = x[second], y[second], mu[second]
        else:
            selected = _lasso_support(x, y, "gaussian", rng)
            x_rows, resp, mu_rows = x, y, mu
        table = _empty_table("beta_star", 1 - cfg.alpha)
        targets = np.zeros(0)
        if selected.size:
            try:
                x_m = x_rows[:, selected]
                if method == "fission":
                    table = linear_ci(
                        resp, x_m, cfg.sigma**2, cfg.tau, cfg.alpha,
                        indices=selected,
                    )
                else:
                    table = _classical_linear_ci(resp, x_m, cfg.alpha, selected)
                targets = _projected_target(x_m, mu_rows)
            except (SingularDesign, np.linalg.LinAlgError):
                table = _empty_table("beta_star", 1 - cfg.alpha)
                targets = np.zeros(0)
        rows.append(_regression_row(trial, method, table, selected, beta, targets))
    return rows


def _glm_trial(cfg: ExperimentConfig, trial: int) -> list:
    rng = RngStream(cfg.seed).substream(trial)
    gen = rng.gen
    if cfg.experiment == "glm_poisson":
        x = _leverage_design(cfg.n, cfg.p, cfg.gamma, gen, binary_cols=True)
        beta = _beta_leverage(cfg.p, cfg.s_delta)
        family = "poisson"
        mu = np.exp(x @ beta)
        y = gen.poisson(mu)
    else:
        x = _binary_normal_design(cfg.n, cfg.p, gen)
        beta = _beta_wide(cfg.p, cfg.s_delta, 2.0)
        family = "binomial"
        mu = 1.0 / (1.0 + np.exp(-(x @ beta)))
        y = (gen.uniform(size=cfg.n) < mu).astype(np.int64)

    rows = []
    for method in cfg.methods:
        offset = None
        if method == "fission":
            if family == "poisson":
                parts = PoissonP1(cfg.tau).fission(y, rng)
                sel_resp, inf_resp = parts.f_part, parts.g_part
                offset = np.full(cfg.n, math.log(1.0 - cfg.tau))
                # thinning leaves independent halves, so the projection
                # target comes from the unconditional means
                proj_resp = mu
            else:
                parts = BernoulliP2(cfg.tau).fission(y, rng)
                sel_resp, inf_resp = parts.f_part, parts.g_part
                f = np.asarray(parts.f_part, dtype=float)
                keep, flip = 1.0 - cfg.tau, cfg.tau
                odds_f1 = keep * mu / (keep * mu + flip * (1.0 - mu))
                odds_f0 = flip * mu / (flip * mu + keep * (1.0 - mu))
                proj_resp = np.where(f == 1.0, odds_f1, odds_f0)
            x_sel = x_inf = x
            mu_inf = proj_resp
        elif method == "split":
            perm = gen.permutation(cfg.n)
            first, second = perm[: cfg.n // 2], perm[cfg.n // 2 :]
            x_sel, sel_resp = x[first], y[first]
            x_inf, inf_resp, mu_inf = x[second], y[second], mu[second]
        else:
            x_sel = x_inf = x
            sel_resp, inf_resp, mu_inf = y, y, mu
        selected = _lasso_support(x_sel, sel_resp, family, rng)
        table = _empty_table("beta_star_n", 1 - cfg.alpha)
        targets = np.zeros(0)
        if selected.size:
            try:
                design = Design(x_inf, np.asarray(inf_resp, dtype=float), family, offset)
                _, table = sandwich_ci(design, selected, cfg.alpha, correction="hc-df")
                targets = _glm_projection(x_inf[:, selected], mu_inf, family)
            except (
                SingularHessian,
                SingularDesign,
                NoConvergence,
                InvalidParameters,
                np.linalg.LinAlgError,
            ):
                table = _empty_table("beta_star_n", 1 - cfg.alpha)
                targets = np.zeros(0)
        rows.append(_regression_row(trial, method, table, selected, beta, targets))
    return rows


def _grid_means(cfg: ExperimentConfig) -> tuple:
    """Non-null indicator and mean vector for the spatial grid."""
    side = cfg.n
    coords = np.linspace(-100.0, 100.0, side)
    xx, yy = np.meshgrid(coords, coords)
    nonnull = (xx**2 + yy**2 <= cfg.radius**2).ravel()
    if cfg.experiment == "multitest_gauss":
        mu = np.where(nonnull, cfg.s_delta, 0.0)
    else:
        mu = np.where(nonnull, 1.0 + cfg.s_delta, 1.0)
    return nonnull, mu


def _multitest_row(trial, method, rejected, nonnull, mu, aggregate, table, targets):
    miscoverage = float("nan")
    agg_length = float("nan")
    if aggregate is not None and rejected.size:
        mu_bar = float(np.mean(mu[rejected]))
        _, lo, hi = aggregate
        miscoverage = float(not lo <= mu_bar <= hi)
        agg_length = float(hi - lo)
    return {
        "trial": trial,
        "method": method,
        "fdr": fdp(rejected, nonnull),
        "power_selected": power_selected(rejected, np.flatnonzero(nonnull)),
        "miscoverage": miscoverage,
        "aggregate_ci_length": agg_length,
        "fcr": fcr(table, targets) if table is not None else float("nan"),
        "avg_ci_length": avg_ci_length(table) if table is not None else float("nan"),
        "n_rejected": float(rejected.size),
    }


def _multitest_gauss_trial(cfg: ExperimentConfig, trial: int) -> list:
    rng = RngStream(cfg.seed).substream(trial)
    gen = rng.gen
    nonnull, mu = _grid_means(cfg)
    y = mu + cfg.sigma * gen.standard_normal(mu.size)

    rows = []
    for method in cfg.methods:
        if method == "fission":
            res = fission_multitest(y, cfg.sigma, cfg.tau, cfg.alpha, cfg.q, rng)
            rejected = res.rejections.rejected
            rows.append(
                _multitest_row(
                    trial, method, rejected, nonnull, mu, res.aggregate,
                    res.per_signal, mu[rejected],
                )
            )
        else:
            pvals = 1.0 - std_normal_cdf(y / cfg.sigma)
            rejected = bh_select(pvals, cfg.q).rejected
            half = float(std_normal_quantile(1 - cfg.alpha / 2)) * cfg.sigma
            table = CiTable(
                indices=rejected,
                estimates=y[rejected],
                lower=y[rejected] - half,
                upper=y[rejected] + half,
                target="mu_individual",
                level=1 - cfg.alpha,
            )
            aggregate = None
            if rejected.size:
                center = float(np.mean(y[rejected]))
                agg_half = half / math.sqrt(rejected.size)
                aggregate = (center, center - agg_half, center + agg_half)
            rows.append(
                _multitest_row(
                    trial, method, rejected, nonnull, mu, aggregate,
                    table, mu[rejected],
                )
            )
    return rows


def _poisson_grid_pvalues(counts, null_mean, rng) -> np.ndarray:
    null = Poisson(null_mean)
    return np.array(
        [1.0 - randomized_pvalue(int(c), null, rng) for c in counts]
    )


def _chisq_count_interval(total: float, scale: float, alpha: float):
    lower = 0.0 if total == 0 else scale * chisq_quantile(alpha / 2, 2.0 * total)
    upper = scale * chisq_quantile(1 - alpha / 2, 2.0 * total + 2.0)
    return lower, upper


def _multitest_poisson_trial(cfg: ExperimentConfig, trial: int) -> list:
    rng = RngStream(cfg.seed).substream(trial)
    gen = rng.gen
    nonnull, mu = _grid_means(cfg)
    y = gen.poisson(mu)

    rows = []
    for method in cfg.methods:
        if method == "fission":
            parts = PoissonP1(cfg.tau).fission(y, rng)
            pvals = _poisson_grid_pvalues(parts.f_part, cfg.tau * 1.0, rng)
            rejected = bh_select(pvals, cfg.q).rejected
            aggregate = None
            if rejected.size:
                g_sel = np.asarray(parts.g_part, dtype=float)[rejected]
                lo, hi = poisson_aggregate_ci(g_sel, cfg.tau, cfg.alpha)
                aggregate = (float(np.mean(g_sel) / (1.0 - cfg.tau)), lo, hi)
        else:
            pvals = _poisson_grid_pvalues(y, 1.0, rng)
            rejected = bh_select(pvals, cfg.q).rejected
            aggregate = None
            if rejected.size:
                total = float(np.sum(y[rejected]))
                scale = 1.0 / (2.0 * rejected.size)
                lo, hi = _chisq_count_interval(total, scale, cfg.alpha)
                aggregate = (float(np.mean(y[rejected])), lo, hi)
        rows.append(
            _multitest_row(trial, method, rejected, nonnull, mu, aggregate, None, None)
        )
    return rows


def _slope_walk_trend(n, p_knot, gen) -> np.ndarray:
    """Piecewise-linear walk: the slope redraws from Unif[-0.5, 0.5] with
    probability p_knot at each step; level starts at zero."""
    v = gen.uniform(-0.5, 0.5)
    out = np.empty(n)
    level = 0.0
    for i in range(n):
        if i > 0 and gen.uniform() < p_knot:
            v = gen.uniform(-0.5, 0.5)
        level += v
        out[i] = level
    return out


def _trend_trial(cfg: ExperimentConfig, trial: int) -> list:
    rng = RngStream(cfg.seed).substream(trial)
    gen = rng.gen
    f0 = _slope_walk_trend(cfg.n, cfg.p_knot, gen)
    y = f0 + cfg.sigma * gen.standard_normal(cfg.n)

    rows = []
    for method in cfg.methods:
        if method == "fission":
            parts = GaussP1(tau=cfg.tau, var=cfg.sigma**2).fission(y, rng)
            sel_series, inf_series, tau_eff = parts.f_part, parts.g_part, cfg.tau
        else:
            sel_series, inf_series, tau_eff = y, y, _NO_FISSION_TAU
        fit = knot_select(
            sel_series, cfg.order, rule="cv_min", n_lambdas=cfg.n_lambdas,
            tol_abs=1e-6, tol_rel=1e-6,
        )
        row = {
            "trial": trial,
            "method": method,
            "fcr": float("nan"),
            "avg_ci_length": float("nan"),
            "simult_type1": float("nan"),
            "uniform_ci_length": float("nan"),
            "n_knots": float(len(fit.knots)),
        }
        try:
            basis = falling_factorial_basis(fit.knots, cfg.order, cfg.n)
            pw = pointwise_band(
                inf_series, basis, basis, cfg.sigma**2, tau_eff, cfg.alpha
            )
            un = uniform_band(inf_series, basis, cfg.sigma, tau_eff, cfg.alpha)
            target = basis @ np.linalg.solve(basis.T @ basis, basis.T @ f0)
            row["fcr"] = float(
                np.mean((target < pw.lower) | (target > pw.upper))
            )
            row["avg_ci_length"] = float(2.0 * np.mean(pw.halfwidths))
            row["simult_type1"] = float(
                np.any((target < un.lower) | (target > un.upper))
            )
            row["uniform_ci_length"] = float(2.0 * np.mean(un.halfwidths))
        except (SingularBasis, RankDeficientBasis, np.linalg.LinAlgError):
            pass
        rows.append(row)
    return rows


_TRIAL_FUNCS = {
    "linreg_leverage": _linreg_trial,
    "linreg_indep": _linreg_trial,
    "glm_poisson": _glm_trial,
    "glm_logistic": _glm_trial,
    "multitest_gauss": _multitest_gauss_trial,
    "multitest_poisson": _multitest_poisson_trial,
    "trendfilter_grid": _trend_trial,
}


def summarize(experiment: str, methods, trial_rows) -> MetricsSummary:
    """Per-method mean and MC standard error of each metric column.

    NaN cells (undefined metrics, e.g. CI length with nothing selected)
    are excluded; ``n_used`` records how many trials contributed.
    """
    columns = _COLUMNS[experiment]
    rows = []
    for method in methods:
        sub = [r for r in trial_rows if r["method"] == method]
        for col in columns:
            vals = np.array([r[col] for r in sub], dtype=float)
            vals = vals[~np.isnan(vals)]
            n_used = int(vals.size)
            mean = float(np.mean(vals)) if n_used else float("nan")
            se = (
                float(np.std(vals, ddof=1) / math.sqrt(n_used))
                if n_used > 1
                else float("nan")
            )
            rows.append(
                {
                    "method": method,
                    "metric": col,
                    "mean": mean,
                    "mc_se": se,
                    "n_used": n_used,
                }
            )
    return MetricsSummary(experiment=experiment, columns=columns, rows=tuple(rows))


def run(config: ExperimentConfig, threads: int = 1) -> SimResult:
    """Execute every trial on its own stream and tabulate the metrics."""
    if threads < 1:
        raise ConfigError(f"threads must be at least 1, got {threads}")
    worker = _TRIAL_FUNCS[config.experiment]
    if threads == 1:
        per_trial = [worker(config, t) for t in range(config.trials)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_trial = list(pool.map(lambda t: worker(config, t), range(config.trials)))
    trial_rows = tuple(row for rows in per_trial for row in rows)
    summary = summarize(config.experiment, config.methods, trial_rows)
    return SimResult(
        config=config,
        columns=_COLUMNS[config.experiment],
        trial_rows=trial_rows,
        summary=summary,
    )


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_trials_csv(path, result: SimResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trial", "method", *result.columns])
        for row in result.trial_rows:
            writer.writerow(
                [row["trial"], row["method"], *(_fmt(row[c]) for c in result.columns)]
            )


def write_summary_csv(path, result: SimResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "metric", "mean", "mc_se", "n_used"])
        for row in result.summary.rows:
            writer.writerow(
                [
                    row["method"],
                    row["metric"],
                    _fmt(row["mean"]),
                    _fmt(row["mc_se"]),
                    row["n_used"],
                ]
            )


def write_config_echo(path, config: ExperimentConfig) -> None:
    with open(path, "w") as fh:
        for f in sorted(fields(ExperimentConfig), key=lambda f: f.name):
            value = getattr(config, f.name)
            if f.name == "methods":
                value = ",".join(value)
            fh.write(f"{f.name}={_fmt(value)}\n")


def rerun_summary_matches(result: SimResult, tol: float = 1e-12) -> bool:
    """Recompute the summary from the trial rows and compare entrywise."""
    redo = summarize(result.config.experiment, result.config.methods, result.trial_rows)
    for a, b in zip(result.summary.rows, redo.rows):
        for key in ("mean", "mc_se"):
            va, vb = a[key], b[key]
            if math.isnan(va) != math.isnan(vb):
                return False
            if not math.isnan(va) and abs(va - vb) > tol:
                return False
    return True
