"""Estimator checks: OLS against hand algebra, IRLS against statsmodels,
lasso against closed-form soft thresholding and direct KKT verification."""

import math

import numpy as np
import pytest
import statsmodels.api as sm

from fission.errors import (
    InvalidParameters,
    NoConvergence,
    SeparationDetected,
    SingularDesign,
)
from fission.fitting import (
    Design,
    cv_select,
    glm_irls,
    lambda_grid,
    lasso_cd,
    ols,
)
from fission.rng import RngStream


def _mean_from_eta(family, eta):
    if family == "gaussian":
        return eta
    if family == "poisson":
        return np.exp(eta)
    return 1.0 / (1.0 + np.exp(-eta))


def kkt_gap(design, grid, path, intercepts):
    """Largest stationarity violation across the grid, recomputed from scratch."""
    x = design.x
    n = x.shape[0]
    xm = x.mean(axis=0)
    xs = x.std(axis=0)
    xt = (x - xm) / xs
    worst = 0.0
    for i, lam in enumerate(grid):
        slopes_std = path[i] * xs
        b0 = intercepts[i] + float(path[i] @ xm)
        eta = b0 + xt @ slopes_std + design.offset
        m = _mean_from_eta(design.family, eta)
        resid = design.weights * (design.y - m)
        grad = xt.T @ resid / n
        worst = max(worst, abs(float(np.sum(resid))) / n)
        for j in range(x.shape[1]):
            if slopes_std[j] == 0.0:
                worst = max(worst, abs(grad[j]) - lam)
            else:
                worst = max(worst, abs(grad[j] - lam * np.sign(slopes_std[j])))
    return worst


def test_ols_intercept_only():
    d = Design(np.ones((5, 1)), np.array([1.0, 2.0, 3.0, 4.0, 5.0]))
    fit = ols(d)
    assert fit.coefficients[0] == pytest.approx(3.0, abs=1e-12)
    assert fit.converged


def test_ols_hand_example():
    d = Design(np.array([[1.0], [2.0], [3.0]]), np.array([1.0, 2.0, 2.0]))
    fit = ols(d)
    assert fit.coefficients[0] == pytest.approx(11.0 / 14.0, abs=1e-12)


def test_ols_orthogonal_columns_decouple():
    x = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    y = np.array([1.0, 3.0, 4.0])
    fit = ols(Design(x, y))
    assert fit.coefficients[0] == pytest.approx((1 + 3) / 2.0, abs=1e-12)
    assert fit.coefficients[1] == pytest.approx(8.0 / 4.0, abs=1e-12)


def test_ols_normal_equations_residual():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((30, 4))
    y = rng.standard_normal(30)
    fit = ols(Design(x, y))
    assert np.max(np.abs(x.T @ x @ fit.coefficients - x.T @ y)) < 1e-8
    assert np.allclose(fit.fitted, x @ fit.coefficients)


def test_ols_offset_and_weights():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((25, 3))
    y = rng.standard_normal(25)
    offset = rng.standard_normal(25)
    w = rng.uniform(0.5, 2.0, size=25)
    fit = ols(Design(x, y, offset=offset, weights=w))
    sw = np.sqrt(w)
    oracle, *_ = np.linalg.lstsq(sw[:, None] * x, sw * (y - offset), rcond=None)
    assert np.allclose(fit.coefficients, oracle, atol=1e-10)
    assert np.allclose(fit.fitted, x @ fit.coefficients + offset)


def test_ols_singular_design():
    x = np.ones((4, 2))
    with pytest.raises(SingularDesign):
        ols(Design(x, np.arange(4.0)))


def test_irls_gaussian_matches_ols():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((40, 3))
    y = rng.standard_normal(40)
    w = rng.uniform(0.5, 2.0, size=40)
    d = Design(x, y, weights=w)
    assert np.allclose(glm_irls(d).coefficients, ols(d).coefficients, atol=1e-10)


def test_irls_poisson_intercept_only():
    d = Design(np.ones((3, 1)), np.array([1.0, 2.0, 3.0]), family="poisson")
    fit = glm_irls(d)
    assert fit.coefficients[0] == pytest.approx(math.log(2.0), abs=1e-8)
    assert np.allclose(fit.fitted, 2.0, atol=1e-9)
    assert fit.converged


def test_irls_poisson_offset_recovers_unthinned_rate():
    # responses behave like thinned counts at keep rate 1/2; the offset
    # makes the intercept estimate the rate before thinning
    d = Design(
        np.ones((3, 1)),
        np.array([1.0, 2.0, 3.0]),
        family="poisson",
        offset=math.log(0.5) * np.ones(3),
    )
    fit = glm_irls(d)
    assert fit.coefficients[0] == pytest.approx(math.log(4.0), abs=1e-8)


def test_irls_logistic_balanced_intercept_zero():
    d = Design(np.ones((4, 1)), np.array([0.0, 0.0, 1.0, 1.0]), family="binomial")
    fit = glm_irls(d)
    assert fit.coefficients[0] == pytest.approx(0.0, abs=1e-10)


def test_irls_poisson_against_statsmodels():
    rng = np.random.default_rng(11)
    x = np.column_stack([np.ones(60), rng.standard_normal((60, 2))])
    eta = 0.4 + 0.5 * x[:, 1] - 0.3 * x[:, 2]
    y = rng.poisson(np.exp(eta)).astype(float)
    offset = rng.uniform(-0.2, 0.2, size=60)
    fit = glm_irls(Design(x, y, family="poisson", offset=offset))
    oracle = sm.GLM(y, x, family=sm.families.Poisson(), offset=offset).fit()
    assert np.allclose(fit.coefficients, oracle.params, atol=5e-6)
    score = x.T @ (y - fit.fitted)
    assert np.max(np.abs(score)) < 1e-6


def test_irls_logistic_against_statsmodels():
    rng = np.random.default_rng(12)
    x = np.column_stack([np.ones(200), rng.standard_normal((200, 3))])
    eta = x @ np.array([-0.3, 0.8, 0.0, -0.5])
    y = (rng.uniform(size=200) < 1 / (1 + np.exp(-eta))).astype(float)
    fit = glm_irls(Design(x, y, family="binomial"))
    oracle = sm.GLM(y, x, family=sm.families.Binomial()).fit()
    assert np.allclose(fit.coefficients, oracle.params, atol=5e-6)


def test_irls_integer_weights_match_row_duplication():
    rng = np.random.default_rng(13)
    x = np.column_stack([np.ones(20), rng.standard_normal(20)])
    y = rng.poisson(2.0, size=20).astype(float)
    w = rng.integers(1, 4, size=20).astype(float)
    weighted = glm_irls(Design(x, y, family="poisson", weights=w))
    reps = w.astype(int)
    expanded = glm_irls(
        Design(np.repeat(x, reps, axis=0), np.repeat(y, reps), family="poisson")
    )
    assert np.allclose(weighted.coefficients, expanded.coefficients, atol=1e-9)


def test_irls_separation_detected():
    x = np.array([[-2.0], [-1.0], [1.0], [2.0]])
    y = np.array([0.0, 0.0, 1.0, 1.0])
    with pytest.raises(SeparationDetected):
        glm_irls(Design(x, y, family="binomial"))


def test_irls_iteration_cap():
    rng = np.random.default_rng(14)
    x = np.column_stack([np.ones(30), rng.standard_normal(30)])
    y = rng.poisson(np.exp(1.0 + 0.7 * x[:, 1])).astype(float)
    with pytest.raises(NoConvergence):
        glm_irls(Design(x, y, family="poisson"), max_iter=1)


def test_design_validation():
    x = np.ones((3, 1))
    with pytest.raises(InvalidParameters):
        Design(x, np.array([0.0, 1.0, 2.0]), family="binomial")
    with pytest.raises(InvalidParameters):
        Design(x, np.array([0.0, 1.0, -1.0]), family="poisson")
    with pytest.raises(InvalidParameters):
        Design(x, np.array([0.0, 1.5, 1.0]), family="poisson")
    with pytest.raises(InvalidParameters):
        Design(x, np.array([0.0, 1.0]))
    with pytest.raises(InvalidParameters):
        Design(x, np.zeros(3), family="laplace")
    with pytest.raises(InvalidParameters):
        Design(x, np.zeros(3), weights=np.array([1.0, -1.0, 1.0]))
    with pytest.raises(InvalidParameters):
        Design(x, np.zeros(3), offset=np.zeros(2))


def test_lambda_grid_shape_and_anchor():
    rng = np.random.default_rng(21)
    x = rng.standard_normal((50, 6))
    y = rng.standard_normal(50)
    d = Design(x, y)
    grid = lambda_grid(d)
    assert len(grid) == 100
    xt = (x - x.mean(axis=0)) / x.std(axis=0)
    lam_max = np.max(np.abs(xt.T @ (y - y.mean()))) / 50
    assert grid[0] == pytest.approx(lam_max, rel=1e-12)
    assert grid[-1] == pytest.approx(1e-3 * lam_max, rel=1e-12)
    ratios = grid[1:] / grid[:-1]
    assert np.allclose(ratios, ratios[0], rtol=1e-10)
    assert np.all(np.diff(grid) < 0)


def test_lasso_all_zero_at_lambda_max():
    rng = np.random.default_rng(22)
    x = rng.standard_normal((40, 5))
    y = rng.standard_normal(40)
    d = Design(x, y)
    grid = lambda_grid(d, n_points=30)
    res = lasso_cd(d, grid)
    assert np.all(res.path[0] == 0.0)
    res2 = lasso_cd(d, np.array([grid[0] * 2.0]))
    assert np.all(res2.path[0] == 0.0)


def test_lasso_single_covariate_soft_threshold():
    x_raw = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    sd = x_raw.std()
    y = np.array([1.0, 3.0, 2.0, 5.0, 4.0])
    d = Design(x_raw[:, None], y)
    rho = float((x_raw / sd) @ (y - y.mean())) / 5
    for lam in (0.2, 0.5, 0.9 * abs(rho), 1.5 * abs(rho)):
        res = lasso_cd(d, np.array([lam]))
        slope_std = math.copysign(max(abs(rho) - lam, 0.0), rho)
        assert res.path[0, 0] == pytest.approx(slope_std / sd, abs=1e-10)
        assert res.intercepts[0] == pytest.approx(y.mean(), abs=1e-10)


def test_lasso_lambda_zero_orthonormal_is_ols():
    rng = np.random.default_rng(23)
    q, _ = np.linalg.qr(rng.standard_normal((12, 3)))
    y = rng.standard_normal(12)
    d = Design(q, y)
    res = lasso_cd(d, np.array([lambda_grid(d)[0], 0.0]))
    full = ols(Design(np.column_stack([np.ones(12), q]), y))
    assert np.allclose(res.path[1], full.coefficients[1:], atol=1e-8)
    assert res.intercepts[1] == pytest.approx(full.coefficients[0], abs=1e-8)


def test_lasso_kkt_gaussian():
    rng = np.random.default_rng(24)
    x = rng.standard_normal((50, 8))
    y = x @ np.array([1.0, -0.5, 0, 0, 0, 0, 0.3, 0]) + rng.standard_normal(50)
    d = Design(x, y)
    grid = lambda_grid(d)
    res = lasso_cd(d, grid)
    assert kkt_gap(d, grid, res.path, res.intercepts) < 1e-6


def test_lasso_kkt_poisson():
    rng = np.random.default_rng(25)
    x = rng.standard_normal((60, 5))
    y = rng.poisson(np.exp(0.5 + 0.4 * x[:, 0] - 0.3 * x[:, 1])).astype(float)
    d = Design(x, y, family="poisson", offset=np.full(60, 0.1))
    grid = lambda_grid(d, n_points=40)
    res = lasso_cd(d, grid)
    assert kkt_gap(d, grid, res.path, res.intercepts) < 1e-6


def test_lasso_kkt_binomial():
    rng = np.random.default_rng(26)
    x = rng.standard_normal((80, 5))
    eta = 0.3 + 0.8 * x[:, 0]
    y = (rng.uniform(size=80) < 1 / (1 + np.exp(-eta))).astype(float)
    d = Design(x, y, family="binomial")
    grid = lambda_grid(d, n_points=40)
    res = lasso_cd(d, grid)
    assert kkt_gap(d, grid, res.path, res.intercepts) < 1e-6


def test_lasso_warm_start_matches_cold_start():
    rng = np.random.default_rng(27)
    x = rng.standard_normal((40, 6))
    y = x[:, 0] - 0.5 * x[:, 1] + rng.standard_normal(40)
    d = Design(x, y)
    grid = lambda_grid(d, n_points=25)
    res = lasso_cd(d, grid)
    for i in (5, 12, 24):
        single = lasso_cd(d, grid[i : i + 1])
        assert np.allclose(res.path[i], single.path[0], atol=1e-8)
        assert res.intercepts[i] == pytest.approx(single.intercepts[0], abs=1e-8)


def test_lasso_poisson_offset_shifts_intercept_only():
    rng = np.random.default_rng(28)
    x = rng.standard_normal((50, 4))
    y = rng.poisson(np.exp(0.6 + 0.5 * x[:, 0])).astype(float)
    grid = lambda_grid(Design(x, y, family="poisson"), n_points=20)
    plain = lasso_cd(Design(x, y, family="poisson"), grid)
    shifted = lasso_cd(
        Design(x, y, family="poisson", offset=np.full(50, 0.3)), grid
    )
    assert np.allclose(plain.path, shifted.path, atol=1e-7)
    assert np.allclose(plain.intercepts - 0.3, shifted.intercepts, atol=1e-7)


def test_cv_pure_noise_mostly_empty():
    empty = 0
    for seed in range(25):
        rng = np.random.default_rng(100 + seed)
        x = rng.standard_normal((100, 10))
        y = rng.standard_normal(100)
        d = Design(x, y)
        res = cv_select(d, lambda_grid(d), k_folds=5, rng=RngStream(seed))
        if res.support.size == 0:
            empty += 1
    assert empty >= 20


def test_cv_strong_signal_recovered():
    hits = 0
    for seed in range(20):
        rng = np.random.default_rng(200 + seed)
        x = rng.standard_normal((100, 10))
        y = math.sqrt(10.0) * x[:, 0] + rng.standard_normal(100)
        d = Design(x, y)
        res = cv_select(d, lambda_grid(d), k_folds=5, rng=RngStream(seed))
        if 0 in res.support:
            hits += 1
    assert hits >= 19


def test_cv_one_se_rule_definition():
    rng = np.random.default_rng(31)
    x = rng.standard_normal((80, 6))
    y = x[:, 0] + rng.standard_normal(80)
    d = Design(x, y)
    grid = lambda_grid(d, n_points=50)
    res = cv_select(d, grid, k_folds=5, rng=RngStream(9))
    assert res.lambda_1se >= res.lambda_min
    i_min = int(np.argmin(res.cv_mean))
    assert res.lambda_min == grid[i_min]
    cutoff = res.cv_mean[i_min] + res.cv_se[i_min]
    eligible = np.flatnonzero(res.cv_mean <= cutoff)
    assert res.lambda_1se == grid[eligible[0]]
    i_1se = int(eligible[0])
    assert set(res.support) == set(np.flatnonzero(res.path[i_1se]))


def test_cv_fold_count_validated():
    rng = np.random.default_rng(1)
    d = Design(rng.standard_normal((10, 2)), rng.standard_normal(10))
    grid = lambda_grid(d)
    with pytest.raises(InvalidParameters):
        cv_select(d, grid, k_folds=1, rng=RngStream(0))
    with pytest.raises(InvalidParameters):
        cv_select(d, grid, k_folds=11, rng=RngStream(0))


def test_cv_deterministic_given_seed():
    rng = np.random.default_rng(33)
    x = rng.standard_normal((60, 5))
    y = x[:, 1] + rng.standard_normal(60)
    d = Design(x, y)
    grid = lambda_grid(d, n_points=30)
    a = cv_select(d, grid, k_folds=4, rng=RngStream(77))
    b = cv_select(d, grid, k_folds=4, rng=RngStream(77))
    assert np.array_equal(a.cv_mean, b.cv_mean)
    assert a.lambda_1se == b.lambda_1se
    assert np.array_equal(a.support, b.support)
