import math

import numpy as np
import pytest

from fission import linalg
from fission.errors import DomainError, NonSquare, NotPositiveDefinite


def reference_normal_cdf(x: float) -> float:
    # Independent of scipy: stdlib erf.
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def bisect_quantile(cdf, p, lo, hi, width=1e-12):
    while hi - lo > width:
        mid = (lo + hi) / 2.0
        if cdf(mid) < p:
            lo = mid
        else:
            hi = mid
    return (lo + hi) / 2.0


class TestCholesky:
    def test_identity(self):
        assert np.allclose(linalg.cholesky(np.eye(3)), np.eye(3))

    def test_hand_2x2(self):
        # [[4,2],[2,3]]: L00=2, L10=1, L11=sqrt(3-1); check L@L.T too.
        L = linalg.cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
        assert np.allclose(L, [[2.0, 0.0], [1.0, math.sqrt(2.0)]])
        assert np.allclose(L @ L.T, [[4.0, 2.0], [2.0, 3.0]])

    def test_indefinite_rejected(self):
        with pytest.raises(NotPositiveDefinite):
            linalg.cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_asymmetric_rejected(self):
        with pytest.raises(DomainError):
            linalg.cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_round_trip_random_spd(self):
        rng = np.random.default_rng(7)
        for n in (2, 5, 17, 60):
            a = rng.normal(size=(n, n))
            m = a @ a.T + n * np.eye(n)
            L = linalg.cholesky(m)
            err = np.linalg.norm(L @ L.T - m) / np.linalg.norm(m)
            assert err < 1e-10
            assert np.allclose(np.triu(L, 1), 0.0)


class TestSolveSpd:
    def test_identity(self):
        v = np.array([3.0, -1.0, 2.0])
        assert np.allclose(linalg.solve_spd(np.eye(3), v), v)

    def test_diagonal(self):
        x = linalg.solve_spd(np.diag([2.0, 4.0]), np.array([2.0, 8.0]))
        assert np.allclose(x, [1.0, 2.0])

    def test_residual_random(self):
        rng = np.random.default_rng(11)
        a = rng.normal(size=(5, 5))
        m = a @ a.T + 5 * np.eye(5)
        rhs = rng.normal(size=5)
        x = linalg.solve_spd(m, rhs)
        assert np.linalg.norm(m @ x - rhs) / np.linalg.norm(rhs) < 1e-8

    def test_agrees_with_explicit_inverse_2x2(self):
        m = np.array([[3.0, 1.0], [1.0, 2.0]])
        rhs = np.array([1.0, 4.0])
        inv = np.array([[2.0, -1.0], [-1.0, 3.0]]) / 5.0
        assert np.allclose(linalg.solve_spd(m, rhs), inv @ rhs, atol=1e-10)


class TestSymEigen:
    def test_identity(self):
        vals, vecs = linalg.sym_eigen(np.eye(4))
        assert np.allclose(vals, 1.0)
        assert np.allclose(vecs.T @ vecs, np.eye(4))

    def test_hand_2x2(self):
        # [[2,1],[1,2]]: char poly (2-l)^2 - 1 = 0 -> l in {3, 1}.
        vals, vecs = linalg.sym_eigen(np.array([[2.0, 1.0], [1.0, 2.0]]))
        assert np.allclose(vals, [3.0, 1.0])
        m = np.array([[2.0, 1.0], [1.0, 2.0]])
        assert np.allclose(m @ vecs, vecs * vals, atol=1e-8)

    def test_diagonal_descending(self):
        vals, _ = linalg.sym_eigen(np.diag([5.0, 2.0, -1.0]))
        assert np.allclose(vals, [5.0, 2.0, -1.0])

    def test_non_square_rejected(self):
        with pytest.raises(NonSquare):
            linalg.sym_eigen(np.ones((2, 3)))

    def test_reconstruction_random(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(8, 8))
        m = (a + a.T) / 2
        vals, vecs = linalg.sym_eigen(m)
        assert np.allclose(m @ vecs, vecs * vals, atol=1e-8)
        assert np.allclose(vecs.T @ vecs, np.eye(8), atol=1e-8)


class TestInverseSqrt:
    def test_identity(self):
        assert np.allclose(linalg.spd_inverse_sqrt(np.eye(3)), np.eye(3))

    def test_diagonal(self):
        r = linalg.spd_inverse_sqrt(np.diag([4.0, 9.0]))
        assert np.allclose(r, np.diag([0.5, 1.0 / 3.0]))

    def test_sandwich_is_identity(self):
        m = np.array([[2.0, 1.0], [1.0, 2.0]])
        r = linalg.spd_inverse_sqrt(m)
        assert np.allclose(r @ m @ r, np.eye(2), atol=1e-7)

    def test_rejects_indefinite(self):
        with pytest.raises(NotPositiveDefinite):
            linalg.spd_inverse_sqrt(np.array([[1.0, 2.0], [2.0, 1.0]]))


class TestSpecialFunctions:
    def test_normal_cdf_center(self):
        assert linalg.std_normal_cdf(0.0) == pytest.approx(0.5, abs=1e-12)

    def test_normal_cdf_matches_erf_reference(self):
        for x in np.linspace(-6, 6, 41):
            assert linalg.std_normal_cdf(x) == pytest.approx(
                reference_normal_cdf(x), abs=1e-10
            )

    def test_normal_cdf_symmetry(self):
        for x in np.linspace(-8, 8, 33):
            total = linalg.std_normal_cdf(x) + linalg.std_normal_cdf(-x)
            assert total == pytest.approx(1.0, abs=1e-12)

    def test_normal_quantile_against_bisection(self):
        # Oracle: bisection on the erf-based CDF.
        for p in (0.025, 0.1, 0.5, 0.9, 0.975, 0.999):
            want = bisect_quantile(reference_normal_cdf, p, -10.0, 10.0)
            assert linalg.std_normal_quantile(p) == pytest.approx(want, abs=1e-8)

    def test_normal_quantile_975(self):
        assert linalg.std_normal_quantile(0.975) == pytest.approx(1.959964, abs=1e-6)

    def test_normal_quantile_domain(self):
        with pytest.raises(DomainError):
            linalg.std_normal_quantile(0.0)
        with pytest.raises(DomainError):
            linalg.std_normal_quantile(1.0)

    def test_chisq_quantile_df2_closed_form(self):
        # df=2 is Exponential(1/2): quantile(p) = -2 ln(1-p).
        assert linalg.chisq_quantile(0.5, 2) == pytest.approx(2 * math.log(2), abs=1e-6)
        assert linalg.chisq_quantile(0.9, 2) == pytest.approx(-2 * math.log(0.1), abs=1e-6)

    def test_chisq_quantile_bisection_oracle(self):
        # Oracle: bisection on the implementation-independent series CDF
        # via the regularized lower incomplete gamma from mpmath-free math:
        # for integer df use the closed-form Poisson-sum identity
        # P(X <= x) = 1 - sum_{j<df/2} e^{-x/2} (x/2)^j / j!  (even df).
        def chisq_cdf_even(x, df):
            k = df // 2
            term = 1.0
            total = term
            for j in range(1, k):
                term *= (x / 2.0) / j
                total += term
            return 1.0 - math.exp(-x / 2.0) * total

        for df in (2, 4, 10):
            for p in (0.05, 0.5, 0.95):
                want = bisect_quantile(lambda t: chisq_cdf_even(t, df), p, 0.0, 200.0)
                assert linalg.chisq_quantile(p, df) == pytest.approx(want, abs=1e-6)

    def test_chisq_quantile_zero_df(self):
        assert linalg.chisq_quantile(0.05, 0) == 0.0

    def test_t_cdf_df1_closed_form(self):
        # Cauchy: F(x) = 1/2 + arctan(x)/pi.
        for x in (-2.0, 0.0, 1.0, 5.0):
            want = 0.5 + math.atan(x) / math.pi
            assert linalg.t_cdf(x, 1) == pytest.approx(want, abs=1e-10)

    def test_t_cdf_large_df_approaches_normal(self):
        for x in (-2.0, -0.5, 0.7, 1.9):
            assert linalg.t_cdf(x, 1000) == pytest.approx(
                reference_normal_cdf(x), abs=1e-3
            )

    def test_t_quantile_round_trip(self):
        for df in (1, 3, 30):
            for p in (0.05, 0.4, 0.975):
                q = linalg.t_quantile(p, df)
                assert linalg.t_cdf(q, df) == pytest.approx(p, abs=1e-9)

    def test_log_gamma(self):
        assert linalg.log_gamma(1.0) == pytest.approx(0.0, abs=1e-12)
        assert linalg.log_gamma(5.0) == pytest.approx(math.log(24.0), abs=1e-10)
        with pytest.raises(DomainError):
            linalg.log_gamma(-1.0)
