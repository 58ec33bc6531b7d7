"""Randomized decompositions of a single observation X into (f, g).

Two shapes of rule exist. P1 rules produce independent parts with known
marginals. P2 rules give f a known marginal and g a known conditional
law given f; "conjugate" P2 rules draw the auxiliary noise from a
likelihood whose conjugate prior is the law of X, so the conditional is
the Bayes posterior in closed form.

Each rule knows how to fission an observation, reconstruct it from the
parts, and report the marginal law of f and the conditional law of g as
a function of the unknown parameter. The parameter argument theta is,
per rule: the mean (Gaussians), the rate (Poisson, Exponential), the
success probability (Bernoulli/Binomial/NegBinomial/Beta), a (shape,
rate) pair (Gamma), or a probability/concentration vector (Categorical,
Dirichlet). Known structural constants (trial count n, NB index r, the
noise covariance) live on the rule itself.

Rules are immutable and safe to share across threads; fission mutates
only the caller's RngStream.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import dists, linalg
from .errors import (
    FissionError,
    InconsistentParts,
    InvalidSpec,
    InvalidTuning,
    OutOfSupport,
    UnsupportedRule,
)
from .rng import RngStream


def _tuning(cond: bool, msg: str) -> None:
    if not cond:
        raise InvalidTuning(msg)


def _is_prob(p) -> bool:
    return np.isscalar(p) and 0.0 < float(p) < 1.0


def _is_count(b) -> bool:
    return np.isscalar(b) and float(b) == int(b) and int(b) >= 1


def _as_counts(x, what: str) -> np.ndarray:
    arr = np.asarray(x)
    if not np.all(np.isfinite(np.asarray(arr, dtype=float))):
        raise OutOfSupport(f"{what} must be finite")
    if not np.all(np.equal(np.mod(arr, 1), 0)):
        raise OutOfSupport(f"{what} must be integer-valued")
    return arr.astype(np.int64)


def _like_input(template, value):
    # scalar in, scalar out; arrays pass through
    if np.ndim(template) == 0:
        return value.item() if isinstance(value, np.ndarray) else value
    return value


def _encode_vector(v: np.ndarray) -> str:
    return ",".join(repr(float(x)) for x in np.asarray(v, dtype=float))


def _decode_vector(s: str) -> np.ndarray:
    return np.array([float(tok) for tok in s.split(",")])


def _encode_matrix(m: np.ndarray) -> str:
    return ";".join(_encode_vector(row) for row in np.asarray(m, dtype=float))


def _decode_matrix(s: str) -> np.ndarray:
    return np.vstack([_decode_vector(row) for row in s.split(";")])


@dataclass(frozen=True)
class FissionOutput:
    """The two parts plus the realized auxiliary draw, kept for audit."""

    f_part: Any
    g_part: Any
    z_aux: Any
    rule: "FissionRule"


@dataclass(frozen=True)
class ConditionalFamily:
    """Law of g given the observed f, as a function of the parameter.

    theta stays an explicit argument (rather than being baked in) so
    that estimation code can treat at(theta) as a likelihood in theta.
    """

    rule: "FissionRule"
    f_observed: Any

    def at(self, theta):
        return self.rule._conditional(self.f_observed, theta)


class FissionRule:
    tag: str = ""

    def fission(self, x, rng: RngStream) -> FissionOutput:
        raise NotImplementedError

    def reconstruct(self, f_part, g_part):
        raise NotImplementedError

    def marginal_of_f(self, theta):
        raise NotImplementedError

    def conditional_of_g(self, f_observed) -> ConditionalFamily:
        self._check_f(f_observed)
        return ConditionalFamily(self, f_observed)

    def _conditional(self, f_observed, theta):
        raise NotImplementedError

    def _check_f(self, f_observed) -> None:
        pass

    def to_record(self) -> dict:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Gaussian rules
# ---------------------------------------------------------------------------


class _GaussBase(FissionRule):
    """Shared handling of the two noise-scale modes (iid scalar / Cholesky)."""

    def __init__(self, tau: float, var=None, chol=None):
        _tuning(np.isscalar(tau) and np.isfinite(tau) and tau > 0, "tau must be positive")
        _tuning((var is None) != (chol is None), "give exactly one of var, chol")
        self.tau = float(tau)
        if var is not None:
            _tuning(np.isscalar(var) and np.isfinite(var) and var > 0, "var must be positive")
            self.var = float(var)
            self.chol = None
        else:
            m = np.asarray(chol, dtype=float)
            _tuning(
                m.ndim == 2
                and m.shape[0] == m.shape[1]
                and bool(np.all(np.isfinite(m)))
                and bool(np.all(np.diag(m) > 0))
                and bool(np.all(m[np.triu_indices_from(m, k=1)] == 0)),
                "chol must be square lower-triangular with positive diagonal",
            )
            self.var = None
            self.chol = m

    def _check_x(self, x):
        arr = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise OutOfSupport("Gaussian input must be finite")
        if self.chol is not None and arr.shape != (self.chol.shape[0],):
            raise OutOfSupport("input length must match the Cholesky factor")
        return arr

    def _draw_noise(self, shape, rng: RngStream):
        if self.chol is None:
            return rng.gen.normal(0.0, np.sqrt(self.var), size=shape)
        return self.chol @ rng.gen.normal(size=self.chol.shape[0])

    def _normal(self, theta, scale2: float, mean=None):
        # scale2 multiplies the rule covariance; mean defaults to theta
        mu = np.asarray(theta, dtype=float) if mean is None else np.asarray(mean, dtype=float)
        if self.chol is not None:
            return dists.MvNormalChol(mu, np.sqrt(scale2) * self.chol)
        if mu.ndim == 0:
            return dists.Normal(float(mu), scale2 * self.var)
        return dists.MvNormalDiag(mu, scale2 * self.var)


class GaussP1(_GaussBase):
    """f = X + tau Z, g = X - Z/tau with Z centered at zero: independent parts."""

    tag = "gauss_p1"

    def fission(self, x, rng: RngStream) -> FissionOutput:
        arr = self._check_x(x)
        z = self._draw_noise(arr.shape, rng)
        f = arr + self.tau * z
        g = arr - z / self.tau
        return FissionOutput(_like_input(x, f), _like_input(x, g), _like_input(x, z), self)

    def reconstruct(self, f_part, g_part):
        f = np.asarray(f_part, dtype=float)
        g = np.asarray(g_part, dtype=float)
        if f.shape != g.shape:
            raise InconsistentParts("part shapes differ")
        x = (f + self.tau**2 * g) / (1 + self.tau**2)
        return _like_input(f_part, x)

    def marginal_of_f(self, theta):
        return self._normal(theta, 1 + self.tau**2)

    def _conditional(self, f_observed, theta):
        # P1: g is independent of f
        return self._normal(theta, 1 + self.tau**-2)

    def to_record(self) -> dict:
        rec = {"tag": self.tag, "tau": self.tau}
        if self.chol is not None:
            rec["chol"] = _encode_matrix(self.chol)
        else:
            rec["var"] = self.var
        return rec


class GaussP2CP(_GaussBase):
    """f = Z with Z ~ N(X, tau S); g = X keeps the conjugate posterior."""

    tag = "gauss_p2_cp"

    def fission(self, x, rng: RngStream) -> FissionOutput:
        arr = self._check_x(x)
        z = arr + np.sqrt(self.tau) * self._draw_noise(arr.shape, rng)
        return FissionOutput(_like_input(x, z), x, _like_input(x, z), self)

    def reconstruct(self, f_part, g_part):
        if np.asarray(f_part).shape != np.asarray(g_part).shape:
            raise InconsistentParts("part shapes differ")
        return g_part

    def marginal_of_f(self, theta):
        return self._normal(theta, 1 + self.tau)

    def _conditional(self, f_observed, theta):
        c = self.tau / (self.tau + 1)
        mean = c * (np.asarray(theta, dtype=float) + np.asarray(f_observed, dtype=float) / self.tau)
        return self._normal(theta, c, mean=mean)

    def to_record(self) -> dict:
        rec = {"tag": self.tag, "tau": self.tau}
        if self.chol is not None:
            rec["chol"] = _encode_matrix(self.chol)
        else:
            rec["var"] = self.var
        return rec


class GaussP2General(FissionRule):
    """f = X - Z, g = X + Z with Z ~ N(0, S0) for an arbitrary S0."""

    tag = "gauss_p2_general"

    def __init__(self, cov, cov0):
        s = np.asarray(cov, dtype=float)
        s0 = np.asarray(cov0, dtype=float)
        _tuning(s.shape == s0.shape, "covariance shapes must match")
        s1 = s + s0
        s2 = s - s0
        try:
            self.chol0 = linalg.cholesky(s0)
            # S + S0 must be invertible for the conditional-law formula
            self.chol1 = linalg.cholesky(s1)
            cond_cov = s1 - s2 @ linalg.solve_spd(s1, s2)
            self.chol_cond = linalg.cholesky(cond_cov)
        except FissionError as exc:
            raise InvalidTuning(f"invalid covariance pair: {exc}") from exc
        self.cov = s
        self.cov0 = s0
        self.s1 = s1
        self.s2 = s2

    def fission(self, x, rng: RngStream) -> FissionOutput:
        arr = np.asarray(x, dtype=float)
        if arr.shape != (self.cov.shape[0],) or not np.all(np.isfinite(arr)):
            raise OutOfSupport("input must be a finite vector matching the covariance")
        z = self.chol0 @ rng.gen.normal(size=arr.size)
        return FissionOutput(arr - z, arr + z, z, self)

    def reconstruct(self, f_part, g_part):
        f = np.asarray(f_part, dtype=float)
        g = np.asarray(g_part, dtype=float)
        if f.shape != g.shape:
            raise InconsistentParts("part shapes differ")
        return (f + g) / 2.0

    def marginal_of_f(self, theta):
        return dists.MvNormalChol(np.asarray(theta, dtype=float), self.chol1)

    def _conditional(self, f_observed, theta):
        mu = np.asarray(theta, dtype=float)
        f = np.asarray(f_observed, dtype=float)
        mean = mu + self.s2 @ linalg.solve_spd(self.s1, f - mu)
        return dists.MvNormalChol(mean, self.chol_cond)

    def to_record(self) -> dict:
        return {"tag": self.tag, "cov": _encode_matrix(self.cov), "cov0": _encode_matrix(self.cov0)}


# ---------------------------------------------------------------------------
# count rules
# ---------------------------------------------------------------------------


class PoissonP1(FissionRule):
    """Thin X ~ Poi(mu) by Z ~ Bin(X, p): f = Z and g = X - Z are independent."""

    tag = "poisson_p1"

    def __init__(self, p: float):
        _tuning(_is_prob(p), "p must lie in (0,1)")
        self.p = float(p)

    def fission(self, x, rng: RngStream) -> FissionOutput:
        counts = _as_counts(x, "Poisson input")
        if np.any(counts < 0):
            raise OutOfSupport("Poisson input must be nonnegative")
        z = rng.gen.binomial(counts, self.p)
        return FissionOutput(_like_input(x, z), _like_input(x, counts - z), _like_input(x, z), self)

    def reconstruct(self, f_part, g_part):
        f = _as_counts(f_part, "f part")
        g = _as_counts(g_part, "g part")
        if f.shape != g.shape or np.any(f < 0) or np.any(g < 0):
            raise InconsistentParts("parts must be nonnegative counts of equal shape")
        return _like_input(f_part, f + g)

    def marginal_of_f(self, theta):
        return dists.Poisson(self.p * theta)

    def _conditional(self, f_observed, theta):
        return dists.Poisson((1 - self.p) * theta)

    def _check_f(self, f_observed) -> None:
        if np.any(_as_counts(f_observed, "f part") < 0):
            raise OutOfSupport("f part must be a nonnegative count")

    def to_record(self) -> dict:
        return {"tag": self.tag, "p": self.p}


class PoissonP2(FissionRule):
    """Add Z ~ Poi(p): f = X + Z, and g = X is binomial given f."""

    tag = "poisson_p2"

    def __init__(self, p: float):
        # p is the added Poisson mean, any positive value
        _tuning(np.isscalar(p) and np.isfinite(p) and p > 0, "p must be positive")
        self.p = float(p)

    def fission(self, x, rng: RngStream) -> FissionOutput:
        counts = _as_counts(x, "Poisson input")
        if np.any(counts < 0):
            raise OutOfSupport("Poisson input must be nonnegative")
        z = rng.gen.poisson(self.p, size=counts.shape if counts.ndim else None)
        return FissionOutput(_like_input(x, counts + z), x, _like_input(x, z), self)

    def reconstruct(self, f_part, g_part):
        f = _as_counts(f_part, "f part")
        g = _as_counts(g_part, "g part")
        if f.shape != g.shape or np.any(g < 0) or np.any(f < g):
            raise InconsistentParts("need f >= g >= 0")
        return g_part

    def marginal_of_f(self, theta):
        return dists.Poisson(theta + self.p)

    def _conditional(self, f_observed, theta):
        return dists.Binomial(int(f_observed), theta / (theta + self.p))

    def _check_f(self, f_observed) -> None:
        if np.any(_as_counts(f_observed, "f part") < 0):
            raise OutOfSupport("f part must be a nonnegative count")

    def to_record(self) -> dict:
        return {"tag": self.tag, "p": self.p}


class BernoulliP2(FissionRule):
    """Flip X ~ Ber(theta) with probability p: f is the (possibly) flipped bit."""

    tag = "bernoulli_p2"

    def __init__(self, p: float):
        _tuning(_is_prob(p), "p must lie in (0,1)")
        self.p = float(p)

    def fission(self, x, rng: RngStream) -> FissionOutput:
        bits = _as_counts(x, "Bernoulli input")
        if np.any((bits < 0) | (bits > 1)):
            raise OutOfSupport("Bernoulli input must be 0 or 1")
        z = rng.gen.binomial(1, self.p, size=bits.shape if bits.ndim else None)
        f = bits + z - 2 * bits * z
        return FissionOutput(_like_input(x, f), x, _like_input(x, z), self)

    def reconstruct(self, f_part, g_part):
        f = _as_counts(f_part, "f part")
        g = _as_counts(g_part, "g part")
        if f.shape != g.shape or np.any((f < 0) | (f > 1) | (g < 0) | (g > 1)):
            raise InconsistentParts("parts must be bits of equal shape")
        return g_part

    def marginal_of_f(self, theta):
        return dists.Bernoulli(theta + self.p - 2 * self.p * theta)

    def _conditional(self, f_observed, theta):
        odds = (self.p / (1 - self.p)) ** (2 * int(f_observed) - 1)
        return dists.Bernoulli(theta / (theta + (1 - theta) * odds))

    def _check_f(self, f_observed) -> None:
        f = _as_counts(f_observed, "f part")
        if np.any((f < 0) | (f > 1)):
            raise OutOfSupport("f part must be 0 or 1")

    def to_record(self) -> dict:
        return {"tag": self.tag, "p": self.p}


class BinomialP2(FissionRule):
    """Split X ~ Bin(n, theta) by Z ~ Bin(X, p): f = Z, g = X - Z."""

    tag = "binomial_p2"

    def __init__(self, n: int, p: float):
        _tuning(_is_count(n), "n must be a positive integer")
        _tuning(_is_prob(p), "p must lie in (0,1)")
        self.n = int(n)
        self.p = float(p)

    def fission(self, x, rng: RngStream) -> FissionOutput:
        counts = _as_counts(x, "Binomial input")
        if np.any((counts < 0) | (counts > self.n)):
            raise OutOfSupport(f"Binomial input must lie in 0..{self.n}")
        z = rng.gen.binomial(counts, self.p)
        return FissionOutput(_like_input(x, z), _like_input(x, counts - z), _like_input(x, z), self)

    def reconstruct(self, f_part, g_part):
        f = _as_counts(f_part, "f part")
        g = _as_counts(g_part, "g part")
        if f.shape != g.shape or np.any(f < 0) or np.any(g < 0) or np.any(f + g > self.n):
            raise InconsistentParts(f"parts must be nonnegative with sum at most {self.n}")
        return _like_input(f_part, f + g)

    def marginal_of_f(self, theta):
        return dists.Binomial(self.n, self.p * theta)

    def _conditional(self, f_observed, theta):
        q = theta * (1 - self.p) / (1 - self.p * theta)
        return dists.Binomial(self.n - int(f_observed), q)

    def _check_f(self, f_observed) -> None:
        f = _as_counts(f_observed, "f part")
        if np.any((f < 0) | (f > self.n)):
            raise OutOfSupport(f"f part must lie in 0..{self.n}")

    def to_record(self) -> dict:
        return {"tag": self.tag, "n": self.n, "p": self.p}


class NegBinomialP2(FissionRule):
    """Split X ~ NB(r, theta) by Z ~ Bin(X, p); r = 1 covers the geometric case."""

    tag = "negbinomial_p2"

    def __init__(self, r: float, p: float):
        _tuning(np.isscalar(r) and np.isfinite(r) and r > 0, "r must be positive")
        _tuning(_is_prob(p), "p must lie in (0,1)")
        self.r = float(r)
        self.p = float(p)

    def fission(self, x, rng: RngStream) -> FissionOutput:
        counts = _as_counts(x, "NegBinomial input")
        if np.any(counts < 0):
            raise OutOfSupport("NegBinomial input must be nonnegative")
        z = rng.gen.binomial(counts, self.p)
        return FissionOutput(_like_input(x, z), _like_input(x, counts - z), _like_input(x, z), self)

    def reconstruct(self, f_part, g_part):
        f = _as_counts(f_part, "f part")
        g = _as_counts(g_part, "g part")
        if f.shape != g.shape or np.any(f < 0) or np.any(g < 0):
            raise InconsistentParts("parts must be nonnegative counts of equal shape")
        return _like_input(f_part, f + g)

    def marginal_of_f(self, theta):
        shrunk = theta + self.p - self.p * theta
        return dists.NegBinomial(self.r, theta / shrunk)

    def _conditional(self, f_observed, theta):
        return dists.NegBinomial(self.r + int(f_observed), theta + self.p - self.p * theta)

    def _check_f(self, f_observed) -> None:
        if np.any(_as_counts(f_observed, "f part") < 0):
            raise OutOfSupport("f part must be a nonnegative count")

    def to_record(self) -> dict:
        return {"tag": self.tag, "r": self.r, "p": self.p}


class CategoricalP2(FissionRule):
    """Replace X ~ Cat(theta) by an independent category with probability p."""

    tag = "categorical_p2"

    def __init__(self, p: float, weights=None, d: int | None = None):
        _tuning(_is_prob(p), "p must lie in (0,1)")
        _tuning(weights is not None or d is not None, "give replacement weights or a category count")
        if weights is None:
            weights = np.full(int(d), 1.0 / int(d))
        w = np.asarray(weights, dtype=float)
        _tuning(
            w.ndim == 1 and w.size >= 2 and bool(np.all(w >= 0)) and abs(w.sum() - 1.0) < 1e-9,
            "weights must be a probability vector",
        )
        self.p = float(p)
        self.weights = w

    @property
    def d(self) -> int:
        return self.weights.size

    def fission(self, x, rng: RngStream) -> FissionOutput:
        cats = _as_counts(x, "Categorical input")
        if np.any((cats < 0) | (cats >= self.d)):
            raise OutOfSupport(f"Categorical input must lie in 0..{self.d - 1}")
        shape = cats.shape if cats.ndim else None
        z = rng.gen.binomial(1, self.p, size=shape)
        repl = rng.gen.choice(self.d, size=shape, p=self.weights)
        f = np.where(z == 1, repl, cats)
        return FissionOutput(_like_input(x, f), x, (z, repl), self)

    def reconstruct(self, f_part, g_part):
        f = _as_counts(f_part, "f part")
        g = _as_counts(g_part, "g part")
        bad = (f < 0) | (f >= self.d) | (g < 0) | (g >= self.d)
        if f.shape != g.shape or np.any(bad):
            raise InconsistentParts("parts must be category indices of equal shape")
        return g_part

    def marginal_of_f(self, theta):
        probs = (1 - self.p) * np.asarray(theta, dtype=float) + self.p * self.weights
        return dists.Categorical(probs)

    def _conditional(self, f_observed, theta):
        t = int(f_observed)
        th = np.asarray(theta, dtype=float)
        probs = th * self.p * self.weights[t]
        probs[t] = th[t] * (1 - self.p + self.p * self.weights[t])
        return dists.Categorical(probs)

    def _check_f(self, f_observed) -> None:
        f = _as_counts(f_observed, "f part")
        if np.any((f < 0) | (f >= self.d)):
            raise OutOfSupport(f"f part must lie in 0..{self.d - 1}")

    def to_record(self) -> dict:
        return {"tag": self.tag, "p": self.p, "weights": _encode_vector(self.weights)}


# ---------------------------------------------------------------------------
# conjugate rules for positive / simplex data
# ---------------------------------------------------------------------------


class _PoissonDrawCP(FissionRule):
    """Shared plumbing for rules that draw Poisson counts at the observation.

    Two modes: b repeated draws Z_i ~ Poi(X), or a single Z ~ Poi(tau X).
    """

    def __init__(self, b=None, tau=None):
        _tuning((b is None) != (tau is None), "give exactly one of b, tau")
        if b is not None:
            _tuning(_is_count(b), "b must be a positive integer")
            self.b = int(b)
            self.tau = None
        else:
            _tuning(np.isscalar(tau) and np.isfinite(tau) and tau > 0, "tau must be positive")
            self.b = None
            self.tau = float(tau)

    def _draw(self, x: float, rng: RngStream):
        if self.b is not None:
            return rng.gen.poisson(x, size=self.b)
        return int(rng.gen.poisson(self.tau * x))

    def _posterior_shift(self, f_observed):
        # returns (added shape, added rate)
        if self.b is not None:
            f = _as_counts(f_observed, "f part")
            if f.shape != (self.b,) or np.any(f < 0):
                raise OutOfSupport(f"f part must be {self.b} nonnegative counts")
            return int(f.sum()), float(self.b)
        f = _as_counts(f_observed, "f part")
        if f.ndim != 0 or f < 0:
            raise OutOfSupport("f part must be a single nonnegative count")
        return int(f), self.tau

    def _check_f(self, f_observed) -> None:
        self._posterior_shift(f_observed)

    def fission(self, x, rng: RngStream) -> FissionOutput:
        if np.ndim(x) != 0 or not np.isfinite(x) or x <= 0:
            raise OutOfSupport("input must be a positive scalar")
        z = self._draw(float(x), rng)
        return FissionOutput(z, x, z, self)

    def reconstruct(self, f_part, g_part):
        self._posterior_shift(f_part)
        if np.ndim(g_part) != 0 or not np.isfinite(g_part) or g_part <= 0:
            raise InconsistentParts("g part must be a positive scalar")
        return g_part

    def _record_tuning(self) -> dict:
        return {"b": self.b} if self.b is not None else {"tau": self.tau}


class GammaCP(_PoissonDrawCP):
    """X ~ Gamma(shape, rate); theta is the (shape, rate) pair."""

    tag = "gamma_cp"

    def marginal_of_f(self, theta):
        shape, rate = float(theta[0]), float(theta[1])
        denom = rate + (1.0 if self.b is not None else self.tau)
        return dists.NegBinomial(shape, rate / denom)

    def _conditional(self, f_observed, theta):
        shape, rate = float(theta[0]), float(theta[1])
        add_shape, add_rate = self._posterior_shift(f_observed)
        return dists.Gamma(shape + add_shape, rate + add_rate)

    def to_record(self) -> dict:
        return {"tag": self.tag, **self._record_tuning()}


class ExponentialCP(_PoissonDrawCP):
    """X ~ Exp(theta); the Gamma rule at shape one, with scalar theta."""

    tag = "exponential_cp"

    def marginal_of_f(self, theta):
        denom = theta + (1.0 if self.b is not None else self.tau)
        return dists.Geometric(theta / denom)

    def _conditional(self, f_observed, theta):
        add_shape, add_rate = self._posterior_shift(f_observed)
        return dists.Gamma(1.0 + add_shape, theta + add_rate)

    def to_record(self) -> dict:
        return {"tag": self.tag, **self._record_tuning()}


class BetaCP(FissionRule):
    """X ~ Beta(theta, 1) (side 1) or Beta(1, theta) (side 2); Z counts
    b trials at success probability X (side 1) or 1 - X (side 2)."""

    tag = "beta_cp"

    def __init__(self, b: int, side: int = 1):
        _tuning(_is_count(b), "b must be a positive integer")
        _tuning(side in (1, 2), "side must be 1 or 2")
        self.b = int(b)
        self.side = int(side)

    def fission(self, x, rng: RngStream) -> FissionOutput:
        if np.ndim(x) != 0 or not (0.0 < float(x) < 1.0):
            raise OutOfSupport("input must lie strictly between 0 and 1")
        prob = float(x) if self.side == 1 else 1.0 - float(x)
        z = int(rng.gen.binomial(self.b, prob))
        return FissionOutput(z, x, z, self)

    def reconstruct(self, f_part, g_part):
        try:
            self._check_f(f_part)
        except OutOfSupport as exc:
            raise InconsistentParts(str(exc)) from exc
        if np.ndim(g_part) != 0 or not (0.0 < float(g_part) < 1.0):
            raise InconsistentParts("g part must lie strictly between 0 and 1")
        return g_part

    def marginal_of_f(self, theta):
        # both sides compound to the same law
        return dists.BetaBinomial(self.b, theta, 1.0)

    def _conditional(self, f_observed, theta):
        z = int(f_observed)
        if self.side == 1:
            return dists.Beta(theta + z, self.b - z + 1.0)
        return dists.Beta(self.b - z + 1.0, theta + z)

    def _check_f(self, f_observed) -> None:
        f = _as_counts(f_observed, "f part")
        if f.ndim != 0 or f < 0 or f > self.b:
            raise OutOfSupport(f"f part must lie in 0..{self.b}")

    def to_record(self) -> dict:
        return {"tag": self.tag, "b": self.b, "side": self.side}


class DirichletCP(FissionRule):
    """X on the simplex; Z ~ Multinom(b, X) leaves a Dirichlet posterior."""

    tag = "dirichlet_cp"

    def __init__(self, b: int):
        _tuning(_is_count(b), "b must be a positive integer")
        self.b = int(b)

    def fission(self, x, rng: RngStream) -> FissionOutput:
        arr = np.asarray(x, dtype=float)
        if arr.ndim != 1 or arr.size < 2 or np.any(arr <= 0) or abs(arr.sum() - 1.0) > 1e-9:
            raise OutOfSupport("input must be an interior point of the simplex")
        z = rng.gen.multinomial(self.b, arr)
        return FissionOutput(z, x, z, self)

    def reconstruct(self, f_part, g_part):
        f = _as_counts(f_part, "f part")
        if f.ndim != 1 or np.any(f < 0) or f.sum() != self.b:
            raise InconsistentParts(f"f part must be counts summing to {self.b}")
        g = np.asarray(g_part, dtype=float)
        if g.shape != f.shape or np.any(g <= 0) or abs(g.sum() - 1.0) > 1e-9:
            raise InconsistentParts("g part must be an interior simplex point of matching length")
        return g_part

    def marginal_of_f(self, theta):
        # log-space Dirichlet-multinomial, safe for large counts
        return dists.DirichletMultinomial(self.b, theta)

    def _conditional(self, f_observed, theta):
        return dists.Dirichlet(np.asarray(theta, dtype=float) + np.asarray(f_observed))

    def _check_f(self, f_observed) -> None:
        f = _as_counts(f_observed, "f part")
        if f.ndim != 1 or np.any(f < 0) or f.sum() != self.b:
            raise OutOfSupport(f"f part must be counts summing to {self.b}")

    def to_record(self) -> dict:
        return {"tag": self.tag, "b": self.b}


# ---------------------------------------------------------------------------
# generic conjugate reversal
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExpFamSpec:
    """Density H(t1,t2) exp{t1'x - t2'A(x)} plus a likelihood
    h(z) exp{x'T(z) - shift'A(x)} whose posterior stays in the family.

    The coordinate x may be a transformed version of the observable (the
    Gamma spec works on log x); family() maps natural parameters back to
    a distribution of the observable, and sample_z draws from the
    likelihood at the observable.
    """

    name: str
    theta1: np.ndarray
    theta2: np.ndarray
    shift: np.ndarray
    log_normalizer: Callable[[np.ndarray, np.ndarray], float]
    log_h: Callable[[Any], float]
    stat_t: Callable[[Any], np.ndarray]
    sample_z: Callable[[Any, RngStream], Any]
    family: Callable[[np.ndarray, np.ndarray], Any]
    in_support: Callable[[Any], bool]
    params: dict = field(default_factory=dict)


def _validate_spec(spec: ExpFamSpec, b: int) -> None:
    if not _is_count(b):
        raise InvalidSpec("b must be a positive integer")
    t1 = np.asarray(spec.theta1, dtype=float)
    t2 = np.asarray(spec.theta2, dtype=float)
    sh = np.asarray(spec.shift, dtype=float)
    if not (np.all(np.isfinite(t1)) and np.all(np.isfinite(t2)) and np.all(np.isfinite(sh))):
        raise InvalidSpec("natural parameters must be finite")
    if sh.shape != t2.shape:
        raise InvalidSpec("shift must match theta2 in shape")
    for fn in (spec.log_normalizer, spec.log_h, spec.stat_t, spec.sample_z, spec.family, spec.in_support):
        if not callable(fn):
            raise InvalidSpec("spec fields must be callable")
    base = spec.log_normalizer(t1, t2)
    if not np.isfinite(base):
        raise InvalidSpec("log normalizer must be finite at the base parameters")


class _ConjugateMarginal:
    """Joint law of the b auxiliary draws under a conjugate reversal."""

    discrete = True

    def __init__(self, rule: "ConjugateReversal"):
        self.rule = rule

    def log_density(self, zs):
        return self.rule.log_marginal_f(zs)

    def sample(self, rng: RngStream):
        spec = self.rule.spec
        x = spec.family(spec.theta1, spec.theta2).sample(rng)
        return np.array([spec.sample_z(x, rng) for _ in range(self.rule.b)])


class ConjugateReversal(FissionRule):
    """Theorem-driven rule: draw b likelihood samples at X and keep X as g."""

    tag = "conjugate_reversal"

    def __init__(self, spec: ExpFamSpec, b: int):
        _validate_spec(spec, b)
        self.spec = spec
        self.b = int(b)

    def _posterior_params(self, zs):
        zs = np.asarray(zs)
        if zs.shape[0] != self.b:
            raise OutOfSupport(f"expected {self.b} auxiliary draws")
        total = np.sum([np.asarray(self.spec.stat_t(z), dtype=float) for z in zs], axis=0)
        t1 = np.asarray(self.spec.theta1, dtype=float) + total
        t2 = np.asarray(self.spec.theta2, dtype=float) + self.b * np.asarray(self.spec.shift, dtype=float)
        return t1, t2

    def fission(self, x, rng: RngStream) -> FissionOutput:
        if not self.spec.in_support(x):
            raise OutOfSupport("input outside the family support")
        zs = np.array([self.spec.sample_z(x, rng) for _ in range(self.b)])
        return FissionOutput(zs, x, zs, self)

    def reconstruct(self, f_part, g_part):
        if np.asarray(f_part).shape[0] != self.b:
            raise InconsistentParts(f"expected {self.b} auxiliary draws")
        if not self.spec.in_support(g_part):
            raise InconsistentParts("g part outside the family support")
        return g_part

    def log_marginal_f(self, zs) -> float:
        t1, t2 = self._posterior_params(zs)
        base = self.spec.log_normalizer(np.asarray(self.spec.theta1, dtype=float), np.asarray(self.spec.theta2, dtype=float))
        return float(sum(self.spec.log_h(z) for z in np.asarray(zs)) + base - self.spec.log_normalizer(t1, t2))

    def marginal_of_f(self, theta=None):
        if theta is None:
            return _ConjugateMarginal(self)
        t1, t2 = np.asarray(theta[0], dtype=float), np.asarray(theta[1], dtype=float)
        return _ConjugateMarginal(ConjugateReversal(_respec(self.spec, t1, t2), self.b))

    def _conditional(self, f_observed, theta):
        if theta is None:
            t1, t2 = self._posterior_params(f_observed)
            return self.spec.family(t1, t2)
        base1 = np.asarray(theta[0], dtype=float)
        base2 = np.asarray(theta[1], dtype=float)
        rule = ConjugateReversal(_respec(self.spec, base1, base2), self.b)
        t1, t2 = rule._posterior_params(f_observed)
        return self.spec.family(t1, t2)

    def _check_f(self, f_observed) -> None:
        self._posterior_params(f_observed)

    def to_record(self) -> dict:
        if not self.spec.name:
            raise InvalidSpec("only named built-in specs serialize")
        return {"tag": self.tag, "spec": self.spec.name, "b": self.b, **self.spec.params}


def _respec(spec: ExpFamSpec, theta1: np.ndarray, theta2: np.ndarray) -> ExpFamSpec:
    return ExpFamSpec(
        name="",
        theta1=theta1,
        theta2=theta2,
        shift=spec.shift,
        log_normalizer=spec.log_normalizer,
        log_h=spec.log_h,
        stat_t=spec.stat_t,
        sample_z=spec.sample_z,
        family=spec.family,
        in_support=spec.in_support,
    )


def gamma_poisson_spec(shape: float, rate: float, draw_rate: float = 1.0) -> ExpFamSpec:
    """Gamma(shape, rate) data with Z ~ Poi(draw_rate * X), in log-x coordinates."""
    if not (shape > 0 and rate > 0 and draw_rate > 0):
        raise InvalidSpec("shape, rate and draw rate must be positive")
    return ExpFamSpec(
        name="gamma_poisson",
        theta1=np.array([shape]),
        theta2=np.array([rate]),
        shift=np.array([draw_rate]),
        log_normalizer=lambda t1, t2: float(t1[0] * np.log(t2[0]) - linalg.log_gamma(t1[0])),
        log_h=lambda z: float(z * np.log(draw_rate) - linalg.log_gamma(z + 1.0)),
        stat_t=lambda z: np.array([float(z)]),
        sample_z=lambda x, rng: int(rng.gen.poisson(draw_rate * x)),
        family=lambda t1, t2: dists.Gamma(float(t1[0]), float(t2[0])),
        in_support=lambda x: np.ndim(x) == 0 and np.isfinite(x) and x > 0,
        params={"shape": float(shape), "rate": float(rate), "draw_rate": float(draw_rate)},
    )


def beta_bernoulli_spec(theta: float, side: int = 1) -> ExpFamSpec:
    """Beta(theta,1) or Beta(1,theta) data with Bernoulli trial draws."""
    if not (theta > 0 and side in (1, 2)):
        raise InvalidSpec("theta must be positive and side 1 or 2")
    a, b = (theta, 1.0) if side == 1 else (1.0, theta)

    def log_norm(t1, _t2):
        # natural parameters are the exponents of x and 1-x
        return float(
            linalg.log_gamma(t1[0] + t1[1] + 2.0)
            - linalg.log_gamma(t1[0] + 1.0)
            - linalg.log_gamma(t1[1] + 1.0)
        )

    def stat_t(z):
        z = float(z)
        return np.array([z, 1.0 - z]) if side == 1 else np.array([1.0 - z, z])

    return ExpFamSpec(
        name="beta_bernoulli",
        theta1=np.array([a - 1.0, b - 1.0]),
        theta2=np.zeros(0),
        shift=np.zeros(0),
        log_normalizer=log_norm,
        log_h=lambda z: 0.0,
        stat_t=stat_t,
        sample_z=lambda x, rng: int(rng.gen.binomial(1, x if side == 1 else 1.0 - x)),
        family=lambda t1, t2: dists.Beta(float(t1[0] + 1.0), float(t1[1] + 1.0)),
        in_support=lambda x: np.ndim(x) == 0 and 0.0 < float(x) < 1.0,
        params={"theta": float(theta), "side": int(side)},
    )


def dirichlet_multinomial_spec(alphas) -> ExpFamSpec:
    """Dirichlet data with single categorical trial draws."""
    a = np.asarray(alphas, dtype=float)
    if a.ndim != 1 or a.size < 2 or not np.all(a > 0):
        raise InvalidSpec("need a positive concentration vector")
    d = a.size

    def log_norm(t1, _t2):
        conc = t1 + 1.0
        return float(linalg.log_gamma(conc.sum()) - sum(linalg.log_gamma(c) for c in conc))

    def stat_t(z):
        out = np.zeros(d)
        out[int(z)] = 1.0
        return out

    def in_support(x):
        arr = np.asarray(x, dtype=float)
        return arr.shape == (d,) and bool(np.all(arr > 0)) and abs(arr.sum() - 1.0) < 1e-9

    return ExpFamSpec(
        name="dirichlet_multinomial",
        theta1=a - 1.0,
        theta2=np.zeros(0),
        shift=np.zeros(0),
        log_normalizer=log_norm,
        log_h=lambda z: 0.0,
        stat_t=stat_t,
        sample_z=lambda x, rng: int(rng.gen.choice(d, p=np.asarray(x, dtype=float))),
        family=lambda t1, t2: dists.Dirichlet(t1 + 1.0),
        in_support=in_support,
        params={"alphas": _encode_vector(a)},
    )


# ---------------------------------------------------------------------------
# module-level operations and serialization
# ---------------------------------------------------------------------------


def fission(x, rule: FissionRule, rng: RngStream) -> FissionOutput:
    return rule.fission(x, rng)


def reconstruct(f_part, g_part, rule: FissionRule):
    return rule.reconstruct(f_part, g_part)


def marginal_of_f(rule: FissionRule, theta):
    return rule.marginal_of_f(theta)


def conditional_of_g(rule: FissionRule, f_observed) -> ConditionalFamily:
    return rule.conditional_of_g(f_observed)


def conjugate_reversal(spec: ExpFamSpec, b: int, x, rng: RngStream) -> FissionOutput:
    return ConjugateReversal(spec, b).fission(x, rng)


def _float_or_none(record: dict, key: str):
    return float(record[key]) if key in record else None


def rule_from_record(record: dict) -> FissionRule:
    tag = record.get("tag")
    if tag == GaussP1.tag or tag == GaussP2CP.tag:
        cls = GaussP1 if tag == GaussP1.tag else GaussP2CP
        if "chol" in record:
            return cls(tau=float(record["tau"]), chol=_decode_matrix(record["chol"]))
        return cls(tau=float(record["tau"]), var=float(record["var"]))
    if tag == GaussP2General.tag:
        return GaussP2General(cov=_decode_matrix(record["cov"]), cov0=_decode_matrix(record["cov0"]))
    if tag == PoissonP1.tag:
        return PoissonP1(p=float(record["p"]))
    if tag == PoissonP2.tag:
        return PoissonP2(p=float(record["p"]))
    if tag == BernoulliP2.tag:
        return BernoulliP2(p=float(record["p"]))
    if tag == BinomialP2.tag:
        return BinomialP2(n=int(record["n"]), p=float(record["p"]))
    if tag == NegBinomialP2.tag:
        return NegBinomialP2(r=float(record["r"]), p=float(record["p"]))
    if tag == CategoricalP2.tag:
        return CategoricalP2(p=float(record["p"]), weights=_decode_vector(record["weights"]))
    if tag == GammaCP.tag:
        return GammaCP(
            b=int(record["b"]) if "b" in record else None,
            tau=_float_or_none(record, "tau"),
        )
    if tag == ExponentialCP.tag:
        return ExponentialCP(
            b=int(record["b"]) if "b" in record else None,
            tau=_float_or_none(record, "tau"),
        )
    if tag == BetaCP.tag:
        return BetaCP(b=int(record["b"]), side=int(record["side"]))
    if tag == DirichletCP.tag:
        return DirichletCP(b=int(record["b"]))
    if tag == ConjugateReversal.tag:
        name = record.get("spec")
        if name == "gamma_poisson":
            spec = gamma_poisson_spec(
                shape=float(record["shape"]),
                rate=float(record["rate"]),
                draw_rate=float(record.get("draw_rate", 1.0)),
            )
        elif name == "beta_bernoulli":
            spec = beta_bernoulli_spec(theta=float(record["theta"]), side=int(record.get("side", 1)))
        elif name == "dirichlet_multinomial":
            spec = dirichlet_multinomial_spec(alphas=_decode_vector(record["alphas"]))
        else:
            raise UnsupportedRule(f"unknown spec name: {name!r}")
        return ConjugateReversal(spec, b=int(record["b"]))
    raise UnsupportedRule(f"unknown rule tag: {tag!r}")


def rule_to_record(rule: FissionRule) -> dict:
    return rule.to_record()
