"""Distribution catalog: sampling, log densities, CDFs and left-limit CDFs.

Every family validates its parameters on construction and is immutable
afterwards. Sampling takes an RngStream; densities and CDFs are pure.
Discrete families expose cdf_left (P(X < x)) for randomized p-values and
support enumeration (truncated at negligible tail mass) for brute-force
law checks.
"""

from __future__ import annotations

import numpy as np
import scipy.stats
from scipy.special import gammaln, xlogy

from .errors import InvalidParameters, OutOfSupport
from .rng import RngStream


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise InvalidParameters(msg)


class Normal:
    discrete = False

    def __init__(self, mean: float, var: float):
        _check(var > 0 and np.isfinite(var) and np.isfinite(mean), "Normal needs finite mean, var > 0")
        self.mean_ = float(mean)
        self.var_ = float(var)

    def sample(self, rng: RngStream, size=None):
        return rng.gen.normal(self.mean_, np.sqrt(self.var_), size=size)

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        return -0.5 * np.log(2 * np.pi * self.var_) - (x - self.mean_) ** 2 / (2 * self.var_)

    def cdf(self, x):
        return scipy.stats.norm.cdf(x, loc=self.mean_, scale=np.sqrt(self.var_))

    def cdf_left(self, x):
        return self.cdf(x)

    def mean(self):
        return self.mean_

    def variance(self):
        return self.var_


class MvNormalDiag:
    """Independent coordinates: mean vector plus per-coordinate variances."""

    discrete = False

    def __init__(self, mean, var):
        self.mean_ = np.atleast_1d(np.asarray(mean, dtype=float))
        self.var_ = np.atleast_1d(np.asarray(var, dtype=float))
        if self.var_.size == 1:
            self.var_ = np.full_like(self.mean_, self.var_[0])
        _check(self.mean_.shape == self.var_.shape, "mean/var length mismatch")
        _check(bool(np.all(self.var_ > 0)), "variances must be positive")

    def sample(self, rng: RngStream, size=None):
        shape = self.mean_.shape if size is None else (size, self.mean_.size)
        return self.mean_ + rng.gen.normal(size=shape) * np.sqrt(self.var_)

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        per = -0.5 * np.log(2 * np.pi * self.var_) - (x - self.mean_) ** 2 / (2 * self.var_)
        return per.sum(axis=-1)

    def mean(self):
        return self.mean_

    def variance(self):
        return self.var_


class MvNormalChol:
    """General Gaussian vector given a pre-computed lower Cholesky factor of the covariance."""

    discrete = False

    def __init__(self, mean, chol_lower):
        self.mean_ = np.atleast_1d(np.asarray(mean, dtype=float))
        self.chol = np.asarray(chol_lower, dtype=float)
        _check(self.chol.ndim == 2 and self.chol.shape[0] == self.chol.shape[1], "Cholesky factor must be square")
        _check(self.chol.shape[0] == self.mean_.size, "mean/factor size mismatch")
        _check(bool(np.all(np.diag(self.chol) > 0)), "Cholesky diagonal must be positive")

    def sample(self, rng: RngStream, size=None):
        if size is None:
            return self.mean_ + self.chol @ rng.gen.normal(size=self.mean_.size)
        z = rng.gen.normal(size=(size, self.mean_.size))
        return self.mean_ + z @ self.chol.T

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        d = self.mean_.size
        w = np.linalg.solve(self.chol, (x - self.mean_).T)
        quad = np.sum(w * w, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(self.chol)))
        return -0.5 * (d * np.log(2 * np.pi) + logdet + quad)

    def covariance(self):
        return self.chol @ self.chol.T

    def mean(self):
        return self.mean_


class _Discrete:
    """Shared helpers for integer-supported families."""

    discrete = True

    def _frozen(self):
        raise NotImplementedError

    def log_density(self, x):
        xi = _as_integer(x, self.__class__.__name__)
        if np.any(~self._in_support(xi)):
            raise OutOfSupport(f"value outside {self.__class__.__name__} support")
        out = self._frozen().logpmf(xi)
        return float(out) if np.ndim(out) == 0 else out

    def cdf(self, x):
        x = np.floor(np.asarray(x, dtype=float))
        return self._frozen().cdf(x)

    def cdf_left(self, x):
        # P(X < x) = P(X <= x-1) on integer support.
        x = np.ceil(np.asarray(x, dtype=float)) - 1.0
        return self._frozen().cdf(x)

    def mean(self):
        return float(self._frozen().mean())

    def variance(self):
        return float(self._frozen().var())

    def enumerate_support(self, mass_tol: float = 1e-12):
        """Integer support points covering at least 1 - mass_tol of the mass."""
        lo = self._support_min()
        hi = self._support_max()
        if hi is None:
            hi = int(self._frozen().ppf(1.0 - mass_tol)) + 1
            while self._frozen().cdf(hi) < 1.0 - mass_tol:
                hi = 2 * hi + 1
        return np.arange(lo, hi + 1)

    def _support_min(self) -> int:
        return 0

    def _support_max(self):
        return None

    def _in_support(self, xi):
        lo = self._support_min()
        hi = self._support_max()
        ok = xi >= lo
        if hi is not None:
            ok &= xi <= hi
        return ok


def _as_integer(x, family: str):
    arr = np.asarray(x)
    if not np.all(np.equal(np.mod(arr, 1), 0)):
        raise OutOfSupport(f"{family} support is integer")
    return arr.astype(np.int64)


class Poisson(_Discrete):
    def __init__(self, mu: float):
        _check(mu >= 0 and np.isfinite(mu), "Poisson needs mu >= 0")
        self.mu = float(mu)

    def _frozen(self):
        return scipy.stats.poisson(self.mu)

    def sample(self, rng: RngStream, size=None):
        return rng.gen.poisson(self.mu, size=size)


class Binomial(_Discrete):
    def __init__(self, n: int, p: float):
        _check(int(n) == n and n >= 0, "Binomial needs integer n >= 0")
        _check(0 <= p <= 1, "Binomial needs p in [0,1]")
        self.n = int(n)
        self.p = float(p)

    def _frozen(self):
        return scipy.stats.binom(self.n, self.p)

    def _support_max(self):
        return self.n

    def sample(self, rng: RngStream, size=None):
        return rng.gen.binomial(self.n, self.p, size=size)


class Bernoulli(Binomial):
    def __init__(self, p: float):
        super().__init__(1, p)


class NegBinomial(_Discrete):
    """Failures before the r-th success; theta is the success probability."""

    def __init__(self, r: float, theta: float):
        _check(r > 0, "NegBinomial needs r > 0")
        _check(0 < theta <= 1, "NegBinomial needs theta in (0,1]")
        self.r = float(r)
        self.theta = float(theta)

    def _frozen(self):
        return scipy.stats.nbinom(self.r, self.theta)

    def sample(self, rng: RngStream, size=None):
        return rng.gen.negative_binomial(self.r, self.theta, size=size)


class Geometric(NegBinomial):
    """Failures before the first success: pmf theta * (1-theta)^k on k = 0, 1, ..."""

    def __init__(self, theta: float):
        super().__init__(1.0, theta)


class BetaBinomial(_Discrete):
    def __init__(self, n: int, a: float, b: float):
        _check(int(n) == n and n >= 0, "BetaBinomial needs integer n >= 0")
        _check(a > 0 and b > 0, "BetaBinomial needs a, b > 0")
        self.n = int(n)
        self.a = float(a)
        self.b = float(b)

    def _frozen(self):
        return scipy.stats.betabinom(self.n, self.a, self.b)

    def _support_max(self):
        return self.n

    def sample(self, rng: RngStream, size=None):
        x = rng.gen.beta(self.a, self.b, size=size)
        return rng.gen.binomial(self.n, x)


class DirichletMultinomial:
    """Counts from n categorical trials whose probabilities are Dirichlet."""

    discrete = True

    def __init__(self, n: int, alphas):
        a = np.asarray(alphas, dtype=float)
        _check(int(n) == n and n >= 0, "DirichletMultinomial needs integer n >= 0")
        _check(a.ndim == 1 and a.size >= 2 and bool(np.all(a > 0)), "need positive alpha vector")
        self.n = int(n)
        self.alphas = a

    def log_density(self, x):
        counts = _as_integer(x, "DirichletMultinomial")
        if np.any(counts < 0) or counts.sum(axis=-1) != self.n:
            raise OutOfSupport("counts must be nonnegative and sum to n")
        total = self.alphas.sum()
        return float(
            gammaln(total)
            + gammaln(self.n + 1)
            - gammaln(self.n + total)
            + (gammaln(self.alphas + counts) - gammaln(self.alphas) - gammaln(counts + 1)).sum(axis=-1)
        )

    def sample(self, rng: RngStream, size=None):
        x = rng.gen.dirichlet(self.alphas, size=size)
        return rng.gen.multinomial(self.n, x)

    def mean(self):
        return self.n * self.alphas / self.alphas.sum()

    def variance(self):
        p = self.alphas / self.alphas.sum()
        scale = (self.n + self.alphas.sum()) / (1 + self.alphas.sum())
        return self.n * p * (1 - p) * scale


class DiscreteUniform(_Discrete):
    """Uniform on the integers {lo, ..., hi}."""

    def __init__(self, lo: int, hi: int):
        _check(int(lo) == lo and int(hi) == hi and lo <= hi, "need integer lo <= hi")
        self.lo = int(lo)
        self.hi = int(hi)

    def _frozen(self):
        return scipy.stats.randint(self.lo, self.hi + 1)

    def _support_min(self):
        return self.lo

    def _support_max(self):
        return self.hi

    def sample(self, rng: RngStream, size=None):
        return rng.gen.integers(self.lo, self.hi + 1, size=size)


class Categorical(_Discrete):
    """Support {0, ..., d-1} with the given probability weights."""

    def __init__(self, weights):
        w = np.asarray(weights, dtype=float)
        _check(w.ndim == 1 and w.size >= 1, "weights must be a vector")
        _check(bool(np.all(w >= 0)) and w.sum() > 0, "weights must be nonnegative, not all zero")
        self.weights = w / w.sum()

    def _frozen(self):
        return scipy.stats.rv_discrete(values=(np.arange(self.weights.size), self.weights))

    def _support_max(self):
        return self.weights.size - 1

    def log_density(self, x):
        xi = _as_integer(x, "Categorical")
        if np.any(~self._in_support(xi)):
            raise OutOfSupport("value outside Categorical support")
        with np.errstate(divide="ignore"):
            out = np.log(self.weights[xi])
        return float(out) if np.ndim(out) == 0 else out

    def cdf(self, x):
        x = np.floor(np.asarray(x, dtype=float)).astype(int)
        cum = np.concatenate([[0.0], np.cumsum(self.weights)])
        idx = np.clip(x + 1, 0, self.weights.size)
        return cum[idx]

    def cdf_left(self, x):
        return self.cdf(np.asarray(x) - 1)

    def mean(self):
        return float(np.arange(self.weights.size) @ self.weights)

    def variance(self):
        k = np.arange(self.weights.size)
        return float((k**2) @ self.weights - self.mean() ** 2)

    def enumerate_support(self, mass_tol: float = 1e-12):
        return np.arange(self.weights.size)

    def sample(self, rng: RngStream, size=None):
        return rng.gen.choice(self.weights.size, size=size, p=self.weights)


class Multinomial:
    discrete = True

    def __init__(self, n: int, probs):
        p = np.asarray(probs, dtype=float)
        _check(int(n) == n and n >= 0, "Multinomial needs integer n >= 0")
        _check(p.ndim == 1 and bool(np.all(p >= 0)) and p.sum() > 0, "bad probability vector")
        self.n = int(n)
        self.probs = p / p.sum()

    def sample(self, rng: RngStream, size=None):
        return rng.gen.multinomial(self.n, self.probs, size=size)

    def log_density(self, x):
        counts = _as_integer(x, "Multinomial")
        if counts.sum(axis=-1) != self.n or np.any(counts < 0):
            raise OutOfSupport("counts must be nonnegative and sum to n")
        return float(
            gammaln(self.n + 1)
            - gammaln(counts + 1).sum(axis=-1)
            + xlogy(counts, self.probs).sum(axis=-1)
        )

    def mean(self):
        return self.n * self.probs


class Gamma:
    """Shape/rate parameterization: density beta^alpha x^(alpha-1) e^(-beta x) / Gamma(alpha)."""

    discrete = False

    def __init__(self, shape: float, rate: float):
        _check(shape > 0 and rate > 0, "Gamma needs shape, rate > 0")
        self.shape = float(shape)
        self.rate = float(rate)

    def sample(self, rng: RngStream, size=None):
        return rng.gen.gamma(self.shape, 1.0 / self.rate, size=size)

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < 0):
            raise OutOfSupport("Gamma support is x >= 0")
        return (
            self.shape * np.log(self.rate)
            - gammaln(self.shape)
            + xlogy(self.shape - 1, x)
            - self.rate * x
        )

    def cdf(self, x):
        return scipy.stats.gamma.cdf(x, self.shape, scale=1.0 / self.rate)

    def cdf_left(self, x):
        return self.cdf(x)

    def mean(self):
        return self.shape / self.rate

    def variance(self):
        return self.shape / self.rate**2


class Exponential(Gamma):
    def __init__(self, rate: float):
        super().__init__(1.0, rate)


class Beta:
    discrete = False

    def __init__(self, a: float, b: float):
        _check(a > 0 and b > 0, "Beta needs a, b > 0")
        self.a = float(a)
        self.b = float(b)

    def sample(self, rng: RngStream, size=None):
        return rng.gen.beta(self.a, self.b, size=size)

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        if np.any((x < 0) | (x > 1)):
            raise OutOfSupport("Beta support is [0,1]")
        return (
            gammaln(self.a + self.b)
            - gammaln(self.a)
            - gammaln(self.b)
            + xlogy(self.a - 1, x)
            + xlogy(self.b - 1, 1 - x)
        )

    def cdf(self, x):
        return scipy.stats.beta.cdf(x, self.a, self.b)

    def cdf_left(self, x):
        return self.cdf(x)

    def mean(self):
        return self.a / (self.a + self.b)

    def variance(self):
        s = self.a + self.b
        return self.a * self.b / (s * s * (s + 1))


class Dirichlet:
    discrete = False

    def __init__(self, alphas):
        a = np.asarray(alphas, dtype=float)
        _check(a.ndim == 1 and a.size >= 2 and bool(np.all(a > 0)), "Dirichlet needs positive alpha vector")
        self.alphas = a

    def sample(self, rng: RngStream, size=None):
        return rng.gen.dirichlet(self.alphas, size=size)

    def log_density(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < 0) or abs(x.sum(axis=-1) - 1.0) > 1e-9:
            raise OutOfSupport("Dirichlet support is the probability simplex")
        return float(
            gammaln(self.alphas.sum())
            - gammaln(self.alphas).sum()
            + xlogy(self.alphas - 1, x).sum(axis=-1)
        )

    def mean(self):
        return self.alphas / self.alphas.sum()
