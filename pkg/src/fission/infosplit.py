"""Fisher-information accounting for fission tunings.

For the additive Gaussian rule the selection part absorbs a fraction
a = 1 / (1 + tau^2) of the Fisher information about the mean, and for
Poisson thinning the fraction is the thinning probability itself.  The
conversions here let callers pick a tuning by information fraction, and
the Monte Carlo checks verify the additivity identity

    I_X(theta) = I_f(theta) + E[ I_{g|f}(theta) ]

on simulated draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, UnsupportedRule
from .rng import RngStream
from .rules import FissionRule, GaussP1, PoissonP1

__all__ = [
    "InfoBudget",
    "InfoReport",
    "VarianceComparison",
    "tau_for_fraction",
    "fraction_for_tau",
    "poisson_fraction",
    "gaussian_info_split",
    "poisson_info_split",
    "info_additivity_check",
    "mle_variance_ratio",
]


def tau_for_fraction(a: float) -> float:
    """Gaussian noise scale whose selection part holds fraction ``a``."""
    a = float(a)
    if not 0.0 < a < 1.0:
        raise DomainError(f"information fraction must lie in (0, 1), got {a}")
    return math.sqrt((1.0 - a) / a)


def fraction_for_tau(tau: float) -> float:
    """Information fraction kept by the selection part at noise scale ``tau``."""
    tau = float(tau)
    if not (tau > 0.0 and math.isfinite(tau)):
        raise DomainError(f"tau must be positive and finite, got {tau}")
    return 1.0 / (1.0 + tau * tau)


def poisson_fraction(p: float) -> float:
    """Information fraction kept by the thinned part; equals ``p`` itself."""
    return p


@dataclass(frozen=True)
class InfoBudget:
    """A target information fraction with its equivalent tunings."""

    fraction: float

    def __post_init__(self) -> None:
        if not 0.0 < self.fraction < 1.0:
            raise DomainError(
                f"information fraction must lie in (0, 1), got {self.fraction}"
            )

    @property
    def tau(self) -> float:
        return tau_for_fraction(self.fraction)

    @property
    def p(self) -> float:
        return self.fraction


def gaussian_info_split(
    tau: float, var: float = 1.0, n: int = 1
) -> tuple[float, float, float]:
    """Closed-form (I_X, I_f, E[I_{g|f}]) for the additive Gaussian rule."""
    if not (tau > 0.0 and math.isfinite(tau)):
        raise DomainError(f"tau must be positive and finite, got {tau}")
    if var <= 0.0:
        raise DomainError(f"variance must be positive, got {var}")
    i_x = n / var
    i_f = n / (var * (1.0 + tau * tau))
    return i_x, i_f, i_x - i_f


def poisson_info_split(
    p: float, mu: float, n: int = 1
) -> tuple[float, float, float]:
    """Closed-form (I_X, I_f, E[I_{g|f}]) for Poisson thinning."""
    if not 0.0 < p < 1.0:
        raise DomainError(f"thinning probability must lie in (0, 1), got {p}")
    if mu <= 0.0:
        raise DomainError(f"mean must be positive, got {mu}")
    i_x = n / mu
    return i_x, p * i_x, (1.0 - p) * i_x


@dataclass(frozen=True)
class InfoReport:
    """Monte Carlo estimates of the three information terms.

    ``residual`` is |I_X - I_f - E[I_{g|f}]| estimated from per-draw
    squared scores, with ``residual_se`` its standard error.
    """

    i_x: float
    i_f: float
    i_g_given_f: float
    residual: float
    residual_se: float


def _scalar_scores(
    rule: FissionRule, theta: float, n_mc: int, rng: RngStream
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-draw score triples (s_X, s_f, s_{g|f}) for the supported rules."""
    if isinstance(rule, GaussP1):
        if rule.var is None:
            raise UnsupportedRule(
                "information check covers the scalar-variance Gaussian rule only"
            )
        var = float(rule.var)
        x = theta + math.sqrt(var) * rng.gen.standard_normal(n_mc)
        out = rule.fission(x, rng)
        s_x = (x - theta) / var
        s_f = (out.f_part - theta) / (var * (1.0 + rule.tau**2))
        s_g = (out.g_part - theta) / (var * (1.0 + rule.tau**-2))
        return s_x, s_f, s_g
    if isinstance(rule, PoissonP1):
        x = rng.gen.poisson(theta, size=n_mc)
        out = rule.fission(x, rng)
        s_x = x / theta - 1.0
        s_f = out.f_part / theta - rule.p
        s_g = out.g_part / theta - (1.0 - rule.p)
        return s_x, s_f, s_g
    raise UnsupportedRule(
        f"information check supports GaussP1 and PoissonP1, not {type(rule).__name__}"
    )


def info_additivity_check(
    rule: FissionRule, theta: float, n_mc: int, rng: RngStream
) -> InfoReport:
    """Estimate the information terms by Monte Carlo and their additivity gap."""
    s_x, s_f, s_g = _scalar_scores(rule, float(theta), int(n_mc), rng)
    r = s_x**2 - s_f**2 - s_g**2
    return InfoReport(
        i_x=float(np.mean(s_x**2)),
        i_f=float(np.mean(s_f**2)),
        i_g_given_f=float(np.mean(s_g**2)),
        residual=float(abs(np.mean(r))),
        residual_se=float(np.std(r, ddof=1) / math.sqrt(len(r))),
    )


@dataclass(frozen=True)
class VarianceComparison:
    """Fission-vs-split efficiency comparison at matched information.

    ``plugin_*`` are per-replication plug-in variances of the two mean
    estimators, averaged across replications; their ratio is the primary
    check because it is nearly free of Monte Carlo noise.  ``mse_*`` are
    the empirical squared errors and ``mse_diff_zscore`` tests the paired
    difference against zero.
    """

    plugin_fission: float
    plugin_split: float
    plugin_ratio: float
    mse_fission: float
    mse_split: float
    mse_diff_zscore: float


def mle_variance_ratio(
    rule: FissionRule, theta: float, n: int, reps: int, rng: RngStream
) -> VarianceComparison:
    """Compare the fission-part MLE with an information-matched data split.

    The split keeps the first ``round(a * n)`` observations where ``a``
    is the information fraction of the rule's selection part.
    """
    theta = float(theta)
    if isinstance(rule, GaussP1):
        if rule.var is None:
            raise UnsupportedRule(
                "variance comparison covers the scalar-variance Gaussian rule only"
            )
        a = fraction_for_tau(rule.tau)
    elif isinstance(rule, PoissonP1):
        a = rule.p
    else:
        raise UnsupportedRule(
            f"variance comparison supports GaussP1 and PoissonP1, not {type(rule).__name__}"
        )
    m = max(1, round(a * n))

    plug_f = np.empty(reps)
    plug_s = np.empty(reps)
    err_f = np.empty(reps)
    err_s = np.empty(reps)
    for rep in range(reps):
        if isinstance(rule, GaussP1):
            var = float(rule.var)
            x = theta + math.sqrt(var) * rng.gen.standard_normal(n)
            f_part = rule.fission(x, rng).f_part
            est_f = float(np.mean(f_part))
            plug_f[rep] = var * (1.0 + rule.tau**2) / n
            est_s = float(np.mean(x[:m]))
            plug_s[rep] = var / m
        else:
            x = rng.gen.poisson(theta, size=n)
            f_part = rule.fission(x, rng).f_part
            est_f = float(np.mean(f_part)) / rule.p
            plug_f[rep] = est_f / (n * rule.p)
            est_s = float(np.mean(x[:m]))
            plug_s[rep] = est_s / m
        err_f[rep] = (est_f - theta) ** 2
        err_s[rep] = (est_s - theta) ** 2

    diff = err_f - err_s
    diff_se = float(np.std(diff, ddof=1) / math.sqrt(reps))
    return VarianceComparison(
        plugin_fission=float(np.mean(plug_f)),
        plugin_split=float(np.mean(plug_s)),
        plugin_ratio=float(np.mean(plug_f) / np.mean(plug_s)),
        mse_fission=float(np.mean(err_f)),
        mse_split=float(np.mean(err_s)),
        mse_diff_zscore=float(np.mean(diff) / diff_se) if diff_se > 0 else 0.0,
    )
