import math

import numpy as np
import pytest
from scipy import stats

from scootdid.design import build_design
from scootdid.errors import (
    EmptyCellError,
    MissingCovariateError,
    NonPositiveWorkingPopError,
    RankDeficientError,
    SingleClusterError,
    UndefinedBaselineError,
)
from scootdid.ingest import panel_from_records
from scootdid.nbdid import (
    ALPHA_FLOOR,
    BASE_COLUMNS,
    DEMOG_COLUMNS,
    FitResult,
    INTERACTION_INDEX,
    ModelSpec,
    ZoneCovariates,
    average_marginal_effect,
    build_design_matrix,
    cluster_robust_cov,
    compute_baselines,
    did_effect,
    fit_nb,
    nb_loglik,
    nb_observed_information,
    nb_score,
    percent_of_baseline,
    relative_education,
)


def sim_nb(rng, X, beta, alpha):
    """Gamma-Poisson mixture draw with Var = mu + alpha mu^2."""
    mu = np.exp(X @ beta)
    if alpha <= 0:
        return rng.poisson(mu).astype(float)
    lam = rng.gamma(1.0 / alpha, alpha * mu)
    return rng.poisson(lam).astype(float)


def design_2x2(n_per_cell, rng=None):
    rows = []
    for treat in (0.0, 1.0):
        for post in (0.0, 1.0):
            rows += [[1.0, treat, post, treat * post]] * n_per_cell
    return np.array(rows)


# --- likelihood values ---


def test_loglik_point_values():
    X = np.ones((1, 1))
    assert nb_loglik(np.zeros(1), 1.0, X, np.array([0.0])) == \
        pytest.approx(-math.log(2.0), abs=1e-14)
    assert nb_loglik(np.zeros(1), 1.0, X, np.array([1.0])) == \
        pytest.approx(-2 * math.log(2.0), abs=1e-14)


def test_loglik_matches_scipy_nbinom():
    rng = np.random.default_rng(4)
    X = np.column_stack([np.ones(40), rng.normal(size=40)])
    beta = np.array([1.2, -0.4])
    y = np.arange(40.0) % 7
    for alpha in (0.05, 0.5, 3.0):
        mu = np.exp(X @ beta)
        want = stats.nbinom.logpmf(y, 1.0 / alpha,
                                   1.0 / (1.0 + alpha * mu)).sum()
        got = nb_loglik(beta, alpha, X, y)
        assert got == pytest.approx(want, rel=1e-12)


def test_loglik_pmf_sums_to_one():
    X = np.ones((1, 1))
    beta = np.array([math.log(2.0)])
    total = sum(math.exp(nb_loglik(beta, 0.7, X, np.array([float(yv)])))
                for yv in range(400))
    assert total == pytest.approx(1.0, abs=1e-10)


def test_loglik_poisson_limit():
    rng = np.random.default_rng(6)
    X = np.column_stack([np.ones(30), rng.normal(size=30)])
    beta = np.array([0.8, 0.3])
    y = rng.poisson(3.0, size=30).astype(float)
    mu = np.exp(X @ beta)
    want = stats.poisson.logpmf(y, mu).sum()
    got = nb_loglik(beta, 1e-12, X, y)
    assert got == pytest.approx(want, rel=1e-9)


def test_loglik_honors_offset():
    X = np.ones((3, 1))
    y = np.array([1.0, 2.0, 3.0])
    off = np.array([0.0, math.log(2.0), math.log(4.0)])
    with_off = nb_loglik(np.array([0.5]), 0.4, X, y, offset=off)
    # offset folds into the linear predictor exactly
    X2 = np.ones((3, 1))
    manual = sum(
        nb_loglik(np.array([0.5 + o]), 0.4, X2[:1], y[i:i + 1])
        for i, o in enumerate(off))
    assert with_off == pytest.approx(manual, rel=1e-12)


# --- derivatives ---


def test_score_matches_finite_differences():
    rng = np.random.default_rng(11)
    X = np.column_stack([np.ones(50), rng.normal(size=50),
                         rng.uniform(size=50)])
    beta = np.array([1.0, -0.3, 0.6])
    y = sim_nb(rng, X, beta, 0.4)
    alpha = 0.3
    g_beta, g_alpha = nb_score(beta, alpha, X, y)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (nb_loglik(beta + e, alpha, X, y)
              - nb_loglik(beta - e, alpha, X, y)) / (2 * h)
        assert g_beta[k] == pytest.approx(fd, rel=1e-6, abs=1e-6)
    fd_a = (nb_loglik(beta, alpha + h, X, y)
            - nb_loglik(beta, alpha - h, X, y)) / (2 * h)
    assert g_alpha == pytest.approx(fd_a, rel=1e-6)


def test_dispersion_score_small_alpha_branch():
    # the closed-form limit must agree with finite differences of the exact
    # log-likelihood even below the branch switch
    rng = np.random.default_rng(12)
    X = np.column_stack([np.ones(40), rng.normal(size=40)])
    beta = np.array([1.1, 0.2])
    y = sim_nb(rng, X, beta, 0.0)
    alpha = 1e-7
    _, g_alpha = nb_score(beta, alpha, X, y)
    limit = 0.5 * float(np.sum((y - np.exp(X @ beta)) ** 2 - y))
    assert g_alpha == pytest.approx(limit, rel=1e-12)
    h = 3e-8
    fd = (nb_loglik(beta, alpha + h, X, y)
          - nb_loglik(beta, alpha - h, X, y)) / (2 * h)
    assert g_alpha == pytest.approx(fd, rel=1e-3)


def test_observed_information_matches_fd_hessian():
    rng = np.random.default_rng(13)
    X = np.column_stack([np.ones(60), rng.normal(size=60)])
    beta = np.array([0.9, -0.5])
    y = sim_nb(rng, X, beta, 0.6)
    alpha = 0.6
    info = nb_observed_information(beta, alpha, X, y)
    h = 1e-5
    for a in range(2):
        e = np.zeros(2)
        e[a] = h
        gp, _ = nb_score(beta + e, alpha, X, y)
        gm, _ = nb_score(beta - e, alpha, X, y)
        fd_row = -(gp - gm) / (2 * h)  # negative Hessian row
        assert np.allclose(info[a], fd_row, rtol=1e-5, atol=1e-6)


def test_stable_branches_agree_at_crossover():
    # the direct and asymptotic evaluations must hand over smoothly at r=1e6
    y = np.array([0.0, 1.0, 2.0, 5.0, 17.0])
    X = np.ones((5, 1))
    beta = np.array([math.log(3.0)])
    below = nb_loglik(beta, 1.0 / 999_999.0, X, y)
    above = nb_loglik(beta, 1.0 / 1_000_001.0, X, y)
    assert below == pytest.approx(above, rel=1e-10)
    gb, _ = nb_score(beta, 1.0 / 999_999.0, X, y)
    ga, _ = nb_score(beta, 1.0 / 1_000_001.0, X, y)
    assert gb[0] == pytest.approx(ga[0], rel=1e-10)


# --- estimation ---


def test_intercept_only_recovers_log_mean():
    y = np.array([3.0, 5.0, 7.0, 2.0, 0.0, 11.0, 4.0, 6.0])
    fit = fit_nb(np.ones((8, 1)), y)
    assert fit.beta[0] == pytest.approx(math.log(y.mean()), abs=1e-8)
    assert np.allclose(fit.fitted_mu, y.mean(), atol=1e-7)
    assert fit.converged


def poisson_irls(X, y, iters=60):
    beta = np.zeros(X.shape[1])
    beta[0] = math.log(y.mean())
    for _ in range(iters):
        mu = np.exp(X @ beta)
        z = X @ beta + (y - mu) / mu
        XtW = (X * mu[:, None]).T
        beta = np.linalg.solve(XtW @ X, XtW @ z)
    return beta


def test_poisson_data_hits_dispersion_floor():
    rng = np.random.default_rng(0)
    X = np.column_stack([np.ones(600), rng.normal(size=600)])
    beta = np.array([1.5, 0.4])
    y = sim_nb(rng, X, beta, 0.0)
    fit = fit_nb(X, y)
    assert fit.alpha == ALPHA_FLOOR
    want = poisson_irls(X, y)
    assert np.allclose(fit.beta, want, atol=1e-4)
    assert fit.converged


def test_recovers_simulated_parameters():
    rng = np.random.default_rng(30)
    n = 4000
    X = np.column_stack([np.ones(n), rng.normal(size=n),
                         (rng.uniform(size=n) < 0.4).astype(float)])
    beta = np.array([1.0, 0.5, -0.7])
    alpha = 0.6
    y = sim_nb(rng, X, beta, alpha)
    fit = fit_nb(X, y)
    assert fit.converged
    assert np.allclose(fit.beta, beta, atol=0.1)
    assert fit.alpha == pytest.approx(alpha, abs=0.1)
    # score is (near) zero at the reported optimum
    g_beta, g_alpha = nb_score(fit.beta, fit.alpha, X, y)
    assert np.max(np.abs(g_beta)) < 1e-4 * n
    assert abs(g_alpha) * fit.alpha < 1e-3 * n


def test_outer_loglik_trace_monotone():
    rng = np.random.default_rng(31)
    X = np.column_stack([np.ones(500), rng.normal(size=500)])
    y = sim_nb(rng, X, np.array([1.2, 0.3]), 0.8)
    fit = fit_nb(X, y)
    trace = fit.outer_loglik_trace
    assert len(trace) >= 2
    assert np.all(np.diff(trace) >= -1e-9)
    assert fit.loglik == pytest.approx(trace[-1])


def test_nested_model_never_fits_worse():
    rng = np.random.default_rng(32)
    n = 800
    x1 = rng.normal(size=n)
    x2 = rng.normal(size=n)
    X_small = np.column_stack([np.ones(n), x1])
    X_big = np.column_stack([np.ones(n), x1, x2])
    y = sim_nb(rng, X_big, np.array([1.0, 0.4, 0.2]), 0.5)
    ll_small = fit_nb(X_small, y).loglik
    ll_big = fit_nb(X_big, y).loglik
    assert ll_big >= ll_small - 1e-6


def test_offset_shifts_intercept():
    rng = np.random.default_rng(33)
    n = 500
    X = np.ones((n, 1))
    y = sim_nb(rng, X, np.array([2.0]), 0.3)
    off = np.full(n, math.log(4.0))
    plain = fit_nb(X, y)
    with_off = fit_nb(X, y, offset=off)
    assert with_off.beta[0] == pytest.approx(plain.beta[0] - math.log(4.0),
                                             abs=1e-6)
    assert with_off.loglik == pytest.approx(plain.loglik, abs=1e-6)


def test_fit_input_validation():
    X = np.column_stack([np.ones(10), np.arange(10.0), np.arange(10.0) * 2])
    y = np.ones(10)
    with pytest.raises(RankDeficientError):
        fit_nb(X, y)
    with pytest.raises(ValueError):
        fit_nb(np.ones((10, 1)), np.zeros(10))
    with pytest.raises(ValueError):
        fit_nb(np.ones((10, 1)), np.ones(9))


# --- marginal effects ---


def _toy_fit(beta, mu):
    n = len(mu)
    k = len(beta)
    return FitResult(beta=np.asarray(beta, float), alpha=0.1,
                     cov=np.eye(k), loglik=0.0, n_obs=n, converged=True,
                     fitted_mu=np.asarray(mu, float),
                     column_names=tuple(f"x{i}" for i in range(k)),
                     x_matrix=np.ones((n, k)), y=np.asarray(mu, float))


def test_ame_is_beta_times_mean_mu():
    res = average_marginal_effect(_toy_fit([0.1], [10.0, 10.0, 10.0]), 0)
    assert res.ame == pytest.approx(1.0, abs=1e-15)
    res = average_marginal_effect(_toy_fit([0.0, 2.0], [3.0, 5.0]), 0)
    assert res.ame == 0.0
    rng = np.random.default_rng(40)
    X = design_2x2(40)
    y = sim_nb(rng, X, np.array([1.5, 0.2, 0.1, 0.4]), 0.3)
    fit = fit_nb(X, y)
    for k in range(4):
        got = average_marginal_effect(fit, k).ame
        assert got == pytest.approx(fit.beta[k] * fit.fitted_mu.mean(),
                                    abs=1e-12)


def test_ame_accepts_column_names():
    rng = np.random.default_rng(41)
    X = design_2x2(30)
    y = sim_nb(rng, X, np.array([1.2, 0.1, 0.2, 0.3]), 0.2)
    fit = fit_nb(X, y, column_names=BASE_COLUMNS[:4])
    by_name = average_marginal_effect(fit, "treatment_post")
    by_index = average_marginal_effect(fit, INTERACTION_INDEX)
    assert by_name == by_index


def test_ame_delta_method_se_for_intercept_only():
    # single-parameter model: ame = b * exp(b), gradient = (1+b) exp(b),
    # so se(ame) = |(1+b) exp(b)| * se(b)
    y = np.array([2.0, 4.0, 3.0, 5.0, 1.0, 3.0])
    fit = fit_nb(np.ones((6, 1)), y)
    b = float(fit.beta[0])
    res = average_marginal_effect(fit, 0)
    want = abs((1 + b) * math.exp(b)) * math.sqrt(fit.cov[0, 0])
    assert res.se == pytest.approx(want, rel=1e-10)


# --- clustered covariance ---


def test_sandwich_matches_hand_computation():
    X = np.array([[1.0, 0], [1, 0], [1, 1], [1, 1]])
    y = np.array([1.0, 3.0, 2.0, 6.0])
    fit = fit_nb(X, y)
    ids = np.array([0, 1, 0, 1])
    got = cluster_robust_cov(fit, ids)

    mu = fit.fitted_mu
    s = (y - mu) / (1.0 + fit.alpha * mu)
    g0 = X[0] * s[0] + X[2] * s[2]
    g1 = X[1] * s[1] + X[3] * s[3]
    meat = np.outer(g0, g0) + np.outer(g1, g1)
    factor = (2.0 / 1.0) * (3.0 / 2.0)
    want = factor * fit.cov @ meat @ fit.cov
    assert np.allclose(got, want, rtol=1e-10, atol=1e-12)


def test_sandwich_aligned_clusters_have_zero_scores():
    # clusters that coincide with the saturated cells sum their scores to
    # zero at the optimum, so the sandwich collapses
    X = np.array([[1.0, 0], [1, 0], [1, 1], [1, 1]])
    y = np.array([1.0, 3.0, 2.0, 6.0])
    fit = fit_nb(X, y)
    got = cluster_robust_cov(fit, [0, 0, 1, 1])
    assert np.all(np.abs(got) < 1e-8)


def test_sandwich_singletons_collapse_to_het_robust():
    rng = np.random.default_rng(50)
    X = np.column_stack([np.ones(80), rng.normal(size=80)])
    y = sim_nb(rng, X, np.array([1.0, 0.3]), 0.4)
    fit = fit_nb(X, y)
    n, k = X.shape
    got = cluster_robust_cov(fit, np.arange(n))
    mu = fit.fitted_mu
    s = (y - mu) / (1.0 + fit.alpha * mu)
    scores = X * s[:, None]
    het = (n / (n - k)) * fit.cov @ (scores.T @ scores) @ fit.cov
    assert np.allclose(got, het, rtol=1e-12)


def test_sandwich_invariant_to_row_order_and_id_labels():
    rng = np.random.default_rng(51)
    X = design_2x2(25)
    y = sim_nb(rng, X, np.array([1.4, 0.2, 0.1, 0.3]), 0.5)
    ids = np.tile(np.arange(10), 10)
    fit = fit_nb(X, y)
    base = cluster_robust_cov(fit, ids)
    relabeled = cluster_robust_cov(fit, np.array([f"zone{v}" for v in ids]))
    assert np.allclose(base, relabeled, rtol=1e-14)
    perm = rng.permutation(len(y))
    fit_p = fit_nb(X[perm], y[perm])
    permuted = cluster_robust_cov(fit_p, ids[perm])
    assert np.allclose(base, permuted, rtol=1e-6)


def test_sandwich_validation():
    X = np.array([[1.0, 0], [1, 0], [1, 1], [1, 1]])
    y = np.array([1.0, 3.0, 2.0, 6.0])
    fit = fit_nb(X, y)
    with pytest.raises(SingleClusterError):
        cluster_robust_cov(fit, [7, 7, 7, 7])
    with pytest.raises(ValueError):
        cluster_robust_cov(fit, [0, 1])


# --- effect summaries ---


def test_percent_of_baseline():
    assert percent_of_baseline(5.0, 50.0) == pytest.approx(10.0)
    assert percent_of_baseline(-2.0, 40.0) == pytest.approx(-5.0)
    for bad in (0.0, -3.0, float("nan"), None):
        with pytest.raises(UndefinedBaselineError):
            percent_of_baseline(1.0, bad)


def test_did_effect_summary():
    rng = np.random.default_rng(60)
    X = design_2x2(60)
    beta = np.array([2.3, -0.1, 0.05, 0.3])
    y = sim_nb(rng, X, beta, 0.2)
    fit = fit_nb(X, y, column_names=BASE_COLUMNS[:4])
    eff = did_effect(fit, baseline=20.0)
    assert eff.beta == fit.beta[INTERACTION_INDEX]
    assert eff.se_beta == pytest.approx(math.sqrt(fit.cov[3, 3]))
    assert eff.z_beta == pytest.approx(eff.beta / eff.se_beta)
    assert eff.significant == (eff.p_beta < 0.05)
    ame = average_marginal_effect(fit, 3)
    assert eff.ame == ame.ame and eff.ame_se == ame.se
    assert eff.percent == pytest.approx(100.0 * eff.ame / 20.0)
    assert did_effect(fit, baseline=None).percent is None


def test_did_effect_uses_supplied_cov():
    rng = np.random.default_rng(61)
    X = design_2x2(50)
    y = sim_nb(rng, X, np.array([1.8, 0.1, 0.1, 0.2]), 0.4)
    fit = fit_nb(X, y)
    vc = cluster_robust_cov(fit, np.tile(np.arange(20), 10))
    eff = did_effect(fit, baseline=None, cov=vc)
    assert eff.se_beta == pytest.approx(math.sqrt(vc[3, 3]))


# --- design matrix assembly ---


def _region_panel():
    rows = []
    counts = iter(range(1, 200))
    for z in ("a", "b"):
        for period in ("Pre", "Post"):
            for day in ("MonThu", "Friday"):
                for block in ("MorningValley", "Night"):
                    rows.append((z, period, day, block, "Bus", "Boarding",
                                 next(counts)))
    rows.append(("a", "Pre", "MonThu", "Lunch", "Metro", "Alighting", 9))
    rows.append(("b", "Pre", "MonThu", "Lunch", "Metro", "Alighting", 9))
    panel = panel_from_records(rows)
    out = build_design(panel, {"a": "R", "b": "R"}, treated={"a"},
                       excluded=set(), role="Generation")
    return out["R"]


COVS = {"a": ZoneCovariates(metro_750m=2.0, working_pop=500.0, educ_years=12.0),
        "b": ZoneCovariates(metro_750m=0.0, working_pop=250.0, educ_years=10.0)}


def test_design_matrix_layout():
    rp = _region_panel()
    spec = ModelSpec(mode="Bus", direction="Boarding", demographics=True)
    X, y, cluster_ids, offset, names = build_design_matrix(rp, spec, COVS)
    assert names == BASE_COLUMNS + DEMOG_COLUMNS
    assert X.shape == (16, 16)
    assert offset is None
    assert np.all(X[:, 0] == 1.0)
    # rows follow the canonical panel order: zone a first
    assert np.all(X[:8, 1] == 1.0) and np.all(X[8:, 1] == 0.0)
    assert np.array_equal(np.unique(cluster_ids), [0, 1])
    assert np.all(X[:, 3] == X[:, 1] * X[:, 2])
    fri = names.index("friday")
    night = names.index("night")
    assert X[:, fri].sum() == 8.0
    assert X[:, night].sum() == 8.0
    m = names.index("metro_750m")
    assert np.all(X[X[:, 1] == 1.0][:, m] == 2.0)
    lw = names.index("log_working_pop")
    assert np.allclose(np.unique(X[:, lw]),
                       [math.log(250.0), math.log(500.0)])
    re_col = names.index("rel_educ")
    assert np.allclose(np.unique(X[:, re_col]), [-1.0, 1.0])
    assert len(y) == 16


def test_design_matrix_base_profile_and_offset():
    rp = _region_panel()
    spec = ModelSpec(mode="Bus", direction="Boarding", demographics=False,
                     exposure_offset=True)
    X, y, _, offset, names = build_design_matrix(rp, spec, COVS)
    assert names == BASE_COLUMNS
    assert X.shape[1] == len(BASE_COLUMNS)
    night_hours = math.log(7.0)
    mv_hours = math.log(3.0)
    assert set(np.round(np.unique(offset), 12)) == \
        {round(night_hours, 12), round(mv_hours, 12)}


def test_design_matrix_error_paths():
    rp = _region_panel()
    with pytest.raises(EmptyCellError):
        build_design_matrix(rp, ModelSpec("Metro", "Boarding"), COVS)
    with pytest.raises(MissingCovariateError):
        build_design_matrix(rp, ModelSpec("Bus", "Boarding"), {"a": COVS["a"]})
    bad = dict(COVS)
    bad["b"] = ZoneCovariates(metro_750m=0.0, working_pop=0.0, educ_years=10.0)
    with pytest.raises(NonPositiveWorkingPopError):
        build_design_matrix(rp, ModelSpec("Bus", "Boarding"), bad)


def test_relative_education_centers_over_region():
    rel = relative_education({"a": 10.0, "b": 12.0, "c": 14.0},
                             ("a", "b", "c"))
    assert rel == {"a": -2.0, "b": 0.0, "c": 2.0}


# --- baseline table ---


def test_baselines_are_pre_period_treated_zone_means():
    rows = [
        ("t1", "Pre", "MonThu", "Lunch", "Bus", "Boarding", 10),
        ("t1", "Pre", "Friday", "Lunch", "Bus", "Boarding", 14),
        ("t1", "Post", "MonThu", "Lunch", "Bus", "Boarding", 99),
        ("t1", "Pre", "MonThu", "Lunch", "Metro", "Alighting", 0),
    ]
    panel = panel_from_records(rows)
    table = compute_baselines(panel, {"t1": "Central"})
    assert table.get("Central", "Bus", "Boarding") == pytest.approx(12.0)
    # all-zero pre mean stays undefined
    assert table.get("Central", "Metro", "Alighting") is None
    assert table.get("Central", "Bus", "Alighting") is None
    with pytest.raises(UndefinedBaselineError):
        table.require("Central", "Metro", "Alighting")
    assert table.require("Central", "Bus", "Boarding") == 12.0
