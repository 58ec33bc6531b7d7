"""Post-selection inference checks: hand-computed CI widths, a brute-force
BH oracle, sandwich pieces from closed forms, and Monte Carlo coverage."""

import math

import numpy as np
import pytest
from scipy import stats

from fission.errors import (
    EmptyRejectionSet,
    InvalidParameters,
    RankDeficientFullModel,
    SingularDesign,
    SingularHessian,
)
from fission.fitting import Design
from fission.posi import (
    CiTable,
    RejectionSet,
    SelectedModel,
    avg_ci_length,
    bh_select,
    by_ci,
    fcr,
    fdp,
    fission_multitest,
    fsr,
    linear_ci,
    linear_ci_estvar,
    poisson_aggregate_ci,
    power_selected,
    power_sign,
    precision_selected,
    randomized_pvalue,
    sandwich_ci,
)
from fission.dists import Poisson
from fission.rng import RngStream


Z975 = stats.norm.ppf(0.975)


def test_ci_table_validates_ordering():
    with pytest.raises(InvalidParameters):
        CiTable(
            indices=np.array([0]),
            estimates=np.array([1.0]),
            lower=np.array([2.0]),
            upper=np.array([3.0]),
            target="beta_star",
            level=0.95,
        )
    with pytest.raises(InvalidParameters):
        CiTable(
            indices=np.array([0]),
            estimates=np.array([1.0]),
            lower=np.array([0.0]),
            upper=np.array([2.0]),
            target="something_else",
            level=0.95,
        )


def test_ci_table_csv_round_trip(tmp_path):
    t = CiTable(
        indices=np.array([3, 7]),
        estimates=np.array([1.0, -0.5]),
        lower=np.array([0.5, -1.5]),
        upper=np.array([1.5, 0.5]),
        target="beta_star",
        level=0.8,
    )
    path = tmp_path / "table.csv"
    t.to_csv(path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "index,estimate,lower,upper,target,level"
    assert lines[1].split(",")[0] == "3"
    assert float(lines[2].split(",")[1]) == -0.5
    assert lines[1].split(",")[4] == "beta_star"


def test_selected_model_sorts_and_slices():
    x = np.arange(12.0).reshape(3, 4)
    m = SelectedModel.from_columns(x, [2, 0])
    assert m.indices == (0, 2)
    assert np.array_equal(m.x_m, x[:, [0, 2]])
    with pytest.raises(InvalidParameters):
        SelectedModel.from_columns(x, [0, 0])
    with pytest.raises(InvalidParameters):
        SelectedModel.from_columns(x, [5])


def test_linear_ci_hand_example():
    x_m = np.ones((2, 1))
    g = np.array([1.0, 3.0])
    table = linear_ci(g, x_m, np.eye(2), tau=1.0, alpha=0.05)
    assert table.estimates[0] == pytest.approx(2.0, abs=1e-12)
    # (X'X)^{-1} X' Sigma X (X'X)^{-1} = 1/2, doubled by (1 + 1/tau^2)
    assert table.upper[0] - table.estimates[0] == pytest.approx(Z975, abs=1e-9)
    assert table.level == 0.95
    assert table.target == "beta_star"


def test_linear_ci_classical_limit_and_ratio():
    rng = np.random.default_rng(3)
    q, _ = np.linalg.qr(rng.standard_normal((30, 3)))
    g = rng.standard_normal(30)
    wide = linear_ci(g, q, np.eye(30), tau=1e9, alpha=0.05)
    assert np.allclose(wide.widths(), 2 * Z975, rtol=1e-9)
    at_one = linear_ci(g, q, np.eye(30), tau=1.0, alpha=0.05)
    assert np.allclose(at_one.widths() / wide.widths(), math.sqrt(2.0), rtol=1e-9)
    # widths scale as sqrt(1 + 1/tau^2) between any two tunings
    a = linear_ci(g, q, np.eye(30), tau=0.5, alpha=0.05)
    b = linear_ci(g, q, np.eye(30), tau=2.0, alpha=0.05)
    expected = math.sqrt((1 + 0.5**-2) / (1 + 2.0**-2))
    assert np.allclose(a.widths() / b.widths(), expected, rtol=1e-12)


def test_linear_ci_general_covariance_matches_direct_formula():
    rng = np.random.default_rng(4)
    x_m = rng.standard_normal((20, 3))
    g = rng.standard_normal(20)
    a = rng.standard_normal((20, 20))
    sigma = a @ a.T / 20 + np.eye(20)
    tau = 0.7
    table = linear_ci(g, x_m, sigma, tau=tau, alpha=0.1)
    xtx_inv = np.linalg.inv(x_m.T @ x_m)
    mid = xtx_inv @ x_m.T @ sigma @ x_m @ xtx_inv
    half = stats.norm.ppf(0.95) * np.sqrt((1 + tau**-2) * np.diag(mid))
    est = xtx_inv @ x_m.T @ g
    assert np.allclose(table.estimates, est, atol=1e-10)
    assert np.allclose(table.upper - table.estimates, half, atol=1e-10)


def test_linear_ci_singular():
    with pytest.raises(SingularDesign):
        linear_ci(np.zeros(4), np.ones((4, 2)), np.eye(4), tau=1.0, alpha=0.05)


def test_linear_ci_coverage_with_selection():
    # selection happens on f only, so the finite-sample law of g|selection
    # keeps exact coverage of the projected target beta*(M)
    rng = RngStream(2024)
    base = np.random.default_rng(55)
    x = base.standard_normal((50, 5))
    x[-1] = 4.0 * np.max(np.abs(x[:-1]), axis=0)
    beta = np.array([1.0, 0.0, -1.0, 0.0, 0.5])
    mu = x @ beta
    tau, alpha = 1.0, 0.05
    hits = 0
    total = 0
    for trial in range(2000):
        sub = rng.substream(trial)
        y = mu + sub.gen.standard_normal(50)
        z = sub.gen.standard_normal(50)
        f = y + tau * z
        g = y - z / tau
        corr = np.abs(x.T @ f)
        sel = np.sort(np.argsort(corr)[-2:])
        x_m = x[:, sel]
        table = linear_ci(g, x_m, np.eye(50), tau=tau, alpha=alpha)
        target = np.linalg.solve(x_m.T @ x_m, x_m.T @ mu)
        hits += int(np.sum((table.lower <= target) & (target <= table.upper)))
        total += 2
    coverage = hits / total
    assert 0.93 <= coverage <= 0.97


def test_linear_ci_estvar_formula_and_report():
    rng_design = np.random.default_rng(8)
    n, p = 40, 4
    x = rng_design.standard_normal((n, p))
    beta = np.array([1.0, 0.0, 0.0, -0.5])
    y = x @ beta + rng_design.standard_normal(n)
    x_m = x[:, :2]
    report = linear_ci_estvar(y, x, x_m, tau=0.8, alpha=0.1, rng=RngStream(9))
    assert report.residual_df == n - p
    # replay the internal randomness to verify every stated formula
    beta_full = np.linalg.solve(x.T @ x, x.T @ y)
    sigma_hat = math.sqrt(float(np.sum((y - x @ beta_full) ** 2)) / (n - p))
    assert report.sigma_hat == pytest.approx(sigma_hat, abs=1e-12)
    z = RngStream(9).gen.standard_normal(n)
    g = y - (sigma_hat / 0.8) * z
    assert np.allclose(report.g_part, g, atol=1e-12)
    assert np.allclose(report.f_part, y + sigma_hat * 0.8 * z, atol=1e-12)
    est = np.linalg.solve(x_m.T @ x_m, x_m.T @ g)
    half = (
        sigma_hat
        * stats.norm.ppf(0.95)
        * np.sqrt((1 + 0.8**-2) * np.diag(np.linalg.inv(x_m.T @ x_m)))
    )
    assert np.allclose(report.table.estimates, est, atol=1e-10)
    assert np.allclose(report.table.upper - report.table.estimates, half, atol=1e-10)


def test_linear_ci_estvar_boundary_and_errors():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((5, 4))
    y = rng.standard_normal(5)
    report = linear_ci_estvar(y, x, x[:, :1], tau=1.0, alpha=0.05, rng=RngStream(1))
    assert report.residual_df == 1
    with pytest.raises(RankDeficientFullModel):
        linear_ci_estvar(y, np.hstack([x, x[:, :1]]), x[:, :1], 1.0, 0.05, RngStream(1))
    with pytest.raises(RankDeficientFullModel):
        linear_ci_estvar(
            rng.standard_normal(3), rng.standard_normal((3, 3)), x[:3, :1], 1.0, 0.05, RngStream(1)
        )


def test_linear_ci_estvar_coverage():
    base = np.random.default_rng(66)
    n, p = 200, 5
    x = base.standard_normal((n, p))
    beta = np.array([0.5, -0.5, 0.0, 0.0, 1.0])
    mu = x @ beta
    x_m = x[:, [0, 4]]
    target = np.linalg.solve(x_m.T @ x_m, x_m.T @ mu)
    rng = RngStream(77)
    hits = 0
    for trial in range(2000):
        sub = rng.substream(trial)
        y = mu + 1.3 * sub.gen.standard_normal(n)
        report = linear_ci_estvar(y, x, x_m, tau=1.0, alpha=0.05, rng=sub)
        hits += int(
            np.sum((report.table.lower <= target) & (target <= report.table.upper))
        )
    assert hits / 4000 >= 0.93


def test_sandwich_hand_poisson_toy():
    d = Design(np.ones((3, 1)), np.array([1.0, 2.0, 3.0]), family="poisson")
    pieces, table = sandwich_ci(d, [0], alpha=0.05)
    assert pieces.h_hat[0, 0] == pytest.approx(6.0, abs=1e-10)
    assert pieces.v_hat[0, 0] == pytest.approx(2.0, abs=1e-10)
    assert pieces.variance[0, 0] == pytest.approx(1.0 / 18.0, abs=1e-10)
    assert table.estimates[0] == pytest.approx(math.log(2.0), abs=1e-9)
    assert table.upper[0] - table.estimates[0] == pytest.approx(
        Z975 * math.sqrt(1.0 / 18.0), abs=1e-9
    )
    assert table.target == "beta_star_n"


def test_sandwich_logistic_balanced_closed_form():
    y = np.array([0.0, 1.0] * 5)
    d = Design(np.ones((10, 1)), y, family="binomial")
    pieces, _ = sandwich_ci(d, [0], alpha=0.05)
    # at m = 1/2: H = n/4, V = n * 1/4, variance = 4/n
    assert pieces.h_hat[0, 0] == pytest.approx(2.5, abs=1e-9)
    assert pieces.v_hat[0, 0] == pytest.approx(2.5, abs=1e-9)
    assert pieces.variance[0, 0] == pytest.approx(0.4, abs=1e-9)


def test_sandwich_gaussian_close_to_classical():
    rng = np.random.default_rng(17)
    n = 500
    x = np.column_stack([np.ones(n), rng.standard_normal(n)])
    y = 1.0 + 0.5 * x[:, 1] + rng.standard_normal(n)
    d = Design(x, y)
    _, table = sandwich_ci(d, [0, 1], alpha=0.05)
    coef = np.linalg.solve(x.T @ x, x.T @ y)
    s2 = float(np.sum((y - x @ coef) ** 2)) / (n - 2)
    classical = 2 * Z975 * np.sqrt(s2 * np.diag(np.linalg.inv(x.T @ x)))
    assert np.all(np.abs(table.widths() / classical - 1.0) < 0.1)


def test_sandwich_df_inflation():
    rng = np.random.default_rng(18)
    x = rng.standard_normal((40, 3))
    y = rng.standard_normal(40)
    d = Design(x, y)
    _, plain = sandwich_ci(d, [0, 1, 2], alpha=0.05)
    _, inflated = sandwich_ci(d, [0, 1, 2], alpha=0.05, correction="hc-df")
    ratio = inflated.widths() / plain.widths()
    assert np.allclose(ratio, math.sqrt(40 / 37), rtol=1e-12)
    with pytest.raises(InvalidParameters):
        sandwich_ci(d, [0], alpha=0.05, correction="cr2")


def test_sandwich_variance_symmetric_psd():
    rng = np.random.default_rng(19)
    x = np.column_stack([np.ones(80), rng.standard_normal((80, 3))])
    y = rng.poisson(np.exp(0.3 + 0.4 * x[:, 1])).astype(float)
    d = Design(x, y, family="poisson", offset=np.full(80, math.log(0.5)))
    pieces, _ = sandwich_ci(d, [0, 1, 2, 3], alpha=0.2)
    assert np.allclose(pieces.variance, pieces.variance.T, atol=1e-12)
    assert np.min(np.linalg.eigvalsh(pieces.variance)) > -1e-12


def test_sandwich_singular_hessian():
    x = np.ones((6, 2))
    d = Design(x, np.arange(6.0) % 2, family="binomial")
    with pytest.raises(SingularHessian):
        sandwich_ci(d, [0, 1], alpha=0.05)


def test_bh_hand_example():
    r = bh_select(np.array([0.01, 0.04, 0.5]), q=0.1)
    assert list(r.rejected) == [0, 1]
    assert r.level == 0.1


def test_bh_extremes():
    assert list(bh_select(np.zeros(5), 0.1).rejected) == [0, 1, 2, 3, 4]
    assert list(bh_select(np.ones(5), 0.1).rejected) == []
    with pytest.raises(InvalidParameters):
        bh_select(np.array([0.5, 1.5]), 0.1)


def _bh_oracle(p, q):
    """Literal step-up definition, quadratic time."""
    n = len(p)
    order = np.argsort(p, kind="stable")
    k_star = 0
    for k in range(1, n + 1):
        if p[order[k - 1]] <= k * q / n:
            k_star = k
    return set(order[:k_star].tolist())


def test_bh_matches_brute_force_and_monotone():
    rng = np.random.default_rng(20)
    for _ in range(50):
        p = np.round(rng.uniform(size=rng.integers(1, 12)), 2)
        got = set(bh_select(p, 0.2).rejected.tolist())
        assert got == _bh_oracle(p, 0.2)
        lo = set(bh_select(p, 0.05).rejected.tolist())
        hi = set(bh_select(p, 0.3).rejected.tolist())
        assert lo <= hi


def test_by_ci_quantile_and_errors():
    table = by_ci(np.array([1.0] * 25), n_total=2500, sigma=1.0, alpha=0.2)
    # beta = 25 * 0.2 / 2500 = 0.002
    assert table.upper[0] - table.estimates[0] == pytest.approx(
        stats.norm.ppf(0.999), abs=1e-9
    )
    classical = by_ci(np.array([2.0, 3.0]), n_total=2, sigma=2.0, alpha=0.05)
    assert classical.widths()[0] == pytest.approx(2 * 2.0 * Z975, abs=1e-9)
    with pytest.raises(EmptyRejectionSet):
        by_ci(np.array([]), n_total=10, sigma=1.0, alpha=0.1)


def test_multitest_widths_and_centers():
    # signal large enough that selection still fires at a big tau, where
    # the per-signal width approaches the classical 2 z sigma
    y = np.full(4, 1e6)
    res = fission_multitest(y, sigma=1.0, tau=1e3, alpha=0.05, q=0.2, rng=RngStream(3))
    assert list(res.rejections.rejected) == [0, 1, 2, 3]
    assert np.allclose(res.per_signal.widths(), 2 * Z975, rtol=1e-5)
    assert np.allclose(res.per_signal.estimates, res.g_parts[res.rejections.rejected])
    single = fission_multitest(
        np.full(1, 1e6), sigma=1.0, tau=1e3, alpha=0.05, q=0.2, rng=RngStream(4)
    )
    agg4 = res.aggregate
    agg1 = single.aggregate
    assert (agg1[2] - agg1[1]) / (agg4[2] - agg4[1]) == pytest.approx(2.0, rel=1e-9)


def test_multitest_pvalues_recomputable():
    y = np.array([0.5, -1.0, 3.0, 2.0])
    res = fission_multitest(y, sigma=2.0, tau=0.5, alpha=0.1, q=0.2, rng=RngStream(5))
    expected = 1 - stats.norm.cdf(res.f_parts / (2.0 * math.sqrt(1 + 0.25)))
    assert np.allclose(res.rejections.pvalues, expected, atol=1e-12)
    two = fission_multitest(
        y, sigma=2.0, tau=0.5, alpha=0.1, q=0.2, rng=RngStream(5), two_sided=True
    )
    expected2 = 2 * (1 - stats.norm.cdf(np.abs(two.f_parts) / (2.0 * math.sqrt(1.25))))
    assert np.allclose(two.rejections.pvalues, expected2, atol=1e-12)


def test_multitest_empty_rejections():
    y = np.full(6, -50.0)
    res = fission_multitest(y, sigma=1.0, tau=1.0, alpha=0.1, q=0.2, rng=RngStream(6))
    assert res.rejections.rejected.size == 0
    assert len(res.per_signal) == 0
    assert res.aggregate is None


def test_multitest_grid_fdr_and_aggregate_coverage():
    # circle of non-null signals in a 50x50 grid, as in the testbed protocol
    coords = np.linspace(-100, 100, 50)
    xx, yy = np.meshgrid(coords, coords)
    nonnull = (xx**2 + yy**2 <= 30.0**2).ravel()
    mu = np.where(nonnull, 2.0, 0.0)
    tau, q, alpha = 0.3, 0.2, 0.2
    rng = RngStream(902)
    fdps = []
    agg_miss = []
    for trial in range(250):
        sub = rng.substream(trial)
        y = mu + sub.gen.standard_normal(mu.size)
        res = fission_multitest(y, sigma=1.0, tau=tau, alpha=alpha, q=q, rng=sub)
        sel = res.rejections.rejected
        if sel.size:
            fdps.append(np.sum(~nonnull[sel]) / sel.size)
            bar = float(np.mean(mu[sel]))
            agg_miss.append(0.0 if res.aggregate[1] <= bar <= res.aggregate[2] else 1.0)
        else:
            fdps.append(0.0)
    assert np.mean(fdps) <= q + 0.03
    assert np.mean(agg_miss) <= alpha + 0.03


class _ContinuousStub:
    def cdf(self, y):
        return 0.625


def test_randomized_pvalue_continuous_and_boundary():
    assert randomized_pvalue(1.0, _ContinuousStub(), RngStream(1)) == 0.625
    null = Poisson(1.0)
    u = RngStream(2).gen.uniform()
    got = randomized_pvalue(0, null, RngStream(2))
    assert got == pytest.approx(null.cdf(0) * u, abs=1e-12)


def test_randomized_pvalue_uniform_under_null():
    null = Poisson(1.0)
    rng = RngStream(42)
    ys = rng.gen.poisson(1.0, size=100_000)
    vals = np.array([randomized_pvalue(int(y), null, rng) for y in ys])
    stat = stats.kstest(vals, "uniform").statistic
    crit = stats.kstwo.ppf(1 - 0.001, len(vals))
    assert stat < crit


def test_poisson_aggregate_hand_values():
    lo, hi = poisson_aggregate_ci(np.array([4]), p=0.5, alpha=0.1)
    assert lo == pytest.approx(stats.chi2.ppf(0.05, 8), rel=1e-10)
    assert hi == pytest.approx(stats.chi2.ppf(0.95, 10), rel=1e-10)
    lo0, hi0 = poisson_aggregate_ci(np.array([0, 0]), p=0.3, alpha=0.1)
    assert lo0 == 0.0
    assert hi0 > 0.0
    with pytest.raises(EmptyRejectionSet):
        poisson_aggregate_ci(np.array([]), p=0.5, alpha=0.1)
    with pytest.raises(InvalidParameters):
        poisson_aggregate_ci(np.array([1.5]), p=0.5, alpha=0.1)


def test_poisson_aggregate_coverage():
    rng = RngStream(88)
    mu_bar = 3.0
    p = 0.4
    hits = 0
    for trial in range(2000):
        sub = rng.substream(trial)
        g = sub.gen.poisson((1 - p) * mu_bar, size=6)
        lo, hi = poisson_aggregate_ci(g, p=p, alpha=0.1)
        hits += int(lo <= mu_bar <= hi)
    assert hits / 2000 >= 0.87


def _table(indices, est, lo, hi, target="beta_star", level=0.95):
    return CiTable(
        indices=np.asarray(indices),
        estimates=np.asarray(est, dtype=float),
        lower=np.asarray(lo, dtype=float),
        upper=np.asarray(hi, dtype=float),
        target=target,
        level=level,
    )


def test_metrics_hand_values():
    table = _table([0, 1, 2], [1.0, 1.0, 1.0], [0.5, 0.5, 0.5], [1.5, 1.5, 1.5])
    targets = np.array([1.0, 1.2, 2.0])
    assert fcr(table, targets) == pytest.approx(1.0 / 3.0)
    assert fcr(_table([], [], [], []), np.array([])) == 0.0
    assert avg_ci_length(table) == pytest.approx(1.0)
    assert math.isnan(avg_ci_length(_table([], [], [], [])))

    assert fdp(np.array([0, 1, 2]), np.array([True, False, True, False])) == pytest.approx(1 / 3)
    assert fdp(np.array([], dtype=int), np.array([True, False])) == 0.0

    assert power_selected([0, 3], np.array([0, 1])) == pytest.approx(0.5)
    assert precision_selected([0, 3], np.array([0, 1])) == pytest.approx(0.5)
    assert precision_selected([], np.array([0])) == 0.0


def test_sign_metrics():
    beta = np.array([1.0, -1.0, 0.0, 2.0])
    # row 0 claims +, correct; row 1 claims + but beta is negative; row 2
    # claims nothing (covers zero) on a null coordinate
    table = _table(
        [0, 1, 2],
        [1.0, 1.0, 0.1],
        [0.2, 0.3, -0.5],
        [1.8, 1.7, 0.7],
    )
    assert fsr(table, beta) == pytest.approx(1.0 / 2.0)
    # live definition: positive-sign discoveries over positive true coefficients
    assert power_sign(table, beta) == pytest.approx(1.0 / 2.0)
    empty = _table([], [], [], [])
    assert fsr(empty, beta) == 0.0
    assert power_sign(empty, beta) == 0.0


def test_rejection_set_csv(tmp_path):
    r = RejectionSet(
        rejected=np.array([1, 3]), pvalues=np.array([0.5, 0.01, 0.7, 0.02]), level=0.1
    )
    path = tmp_path / "rej.csv"
    r.to_csv(path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "index,estimate,lower,upper,target,level"
    assert len(lines) == 3
    assert lines[1].startswith("1,0.01")
    with pytest.raises(InvalidParameters):
        RejectionSet(np.array([5]), np.array([0.1, 0.2]), 0.1)
