"""Negative-binomial difference-in-differences estimation.

The response is a count cell; the mean is log-linear in treatment, period,
their interaction, calendar dummies, and zone covariates. Dispersion follows
the quadratic (NB2) variance Var = mu + alpha * mu^2. Estimation is joint
maximum likelihood: Fisher-scoring Newton steps for the coefficients inside a
safeguarded Newton/bisection search over ln(alpha).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import digamma, gammaln
from scipy.stats import norm

from .errors import (
    EmptyCellError,
    MissingCovariateError,
    NonPositiveWorkingPopError,
    NotConvergedWarning,
    RankDeficientError,
    SeparationWarning,
    SingleClusterError,
    UndefinedBaselineError,
)
from .design import RegionPanel
from .ingest import DAY_TYPES, DIRECTIONS, MODES, TIME_BLOCKS, ObservationPanel

ALPHA_FLOOR = 1e-10
_ALPHA_CEIL = 1e6

# Design-matrix column order. MonThu and MorningValley are the reference
# levels; the two demographic terms appear only in the extended profile.
BASE_COLUMNS = (
    "intercept", "treatment", "post", "treatment_post",
    "friday", "saturday", "sunday",
    "morning_peak", "lunch", "afternoon_valley", "afternoon_peak",
    "night_valley", "night",
    "metro_750m",
)
DEMOG_COLUMNS = ("log_working_pop", "rel_educ")
INTERACTION_INDEX = 3

_DAY_DUMMIES = ("Friday", "Saturday", "Sunday")
_BLOCK_DUMMIES = ("MorningPeak", "Lunch", "AfternoonValley", "AfternoonPeak",
                  "NightValley", "Night")


@dataclass(frozen=True)
class ZoneCovariates:
    """Zone-level regression covariates."""

    metro_750m: float
    working_pop: float
    educ_years: float


@dataclass(frozen=True)
class ModelSpec:
    """Which response slice to fit and which covariate profile to use."""

    mode: str
    direction: str
    demographics: bool = True
    exposure_offset: bool = False
    clustered_se: bool = False
    name: str = ""

    @property
    def column_names(self) -> tuple[str, ...]:
        return BASE_COLUMNS + DEMOG_COLUMNS if self.demographics else BASE_COLUMNS


def relative_education(educ_by_zone: dict[str, float],
                       region_zone_ids: Sequence[str]) -> dict[str, float]:
    """Zone education minus the mean over the region's zones."""
    vals = [educ_by_zone[z] for z in region_zone_ids]
    mean = sum(vals) / len(vals)
    return {z: educ_by_zone[z] - mean for z in region_zone_ids}


def build_design_matrix(rpanel: RegionPanel, spec: ModelSpec,
                        covariates: dict[str, ZoneCovariates]):
    """Design matrix for one (region, mode, direction) slice.

    Returns (X, y, cluster_ids, offset, column_names); rows follow the
    panel's canonical (zone, period, day, block) order and cluster ids are
    zone indices.
    """
    panel = rpanel.panel
    mode_c = MODES.index(spec.mode)
    dir_c = DIRECTIONS.index(spec.direction)
    mask = (panel.mode == mode_c) & (panel.direction == dir_c)
    if not np.any(mask):
        raise EmptyCellError(
            f"region {rpanel.region}: no {spec.mode}/{spec.direction} records")
    zone_idx = panel.zone_idx[mask]
    treat = rpanel.treat_by_zone[zone_idx].astype(float)
    if treat.min() == treat.max():
        raise EmptyCellError(
            f"region {rpanel.region}: {spec.mode}/{spec.direction} slice has "
            f"no {'control' if treat.min() == 1 else 'treated'} rows")
    post = (panel.period[mask] == 1).astype(float)
    day = panel.day[mask]
    block = panel.block[mask]
    n = int(mask.sum())

    cols = [np.ones(n), treat, post, treat * post]
    for lab in _DAY_DUMMIES:
        cols.append((day == DAY_TYPES.index(lab)).astype(float))
    for lab in _BLOCK_DUMMIES:
        cols.append((block == TIME_BLOCKS.index(lab)).astype(float))

    metro = np.empty(n)
    log_wpop = np.empty(n)
    rel_educ = np.empty(n)
    educ_by_zone = {}
    for zid in rpanel.region_zone_ids:
        if zid not in covariates:
            raise MissingCovariateError(f"no covariates for zone {zid!r}")
        educ_by_zone[zid] = covariates[zid].educ_years
    rel = relative_education(educ_by_zone, rpanel.region_zone_ids)
    for t, zi in enumerate(zone_idx):
        zid = panel.zone_ids[zi]
        if zid not in covariates:
            raise MissingCovariateError(f"no covariates for zone {zid!r}")
        cov = covariates[zid]
        metro[t] = cov.metro_750m
        if spec.demographics:
            if cov.working_pop <= 0:
                raise NonPositiveWorkingPopError(
                    f"zone {zid!r} has no working-age population")
            log_wpop[t] = math.log(cov.working_pop)
            rel_educ[t] = rel[zid]
    cols.append(metro)
    if spec.demographics:
        cols.append(log_wpop)
        cols.append(rel_educ)

    X = np.column_stack(cols)
    y = panel.count[mask].astype(float)
    offset = np.log(panel.exposure_hours[mask]) if spec.exposure_offset else None
    return X, y, zone_idx.astype(np.int64), offset, spec.column_names


# --- NB2 likelihood pieces ---


def _lgamma_diff(r: float, y: np.ndarray) -> np.ndarray:
    """ln Gamma(r + y) - ln Gamma(r), stable for huge r."""
    if r <= 1e6:
        return gammaln(r + y) - gammaln(r)
    q = y / r
    return (y * math.log(r) + (r + y - 0.5) * np.log1p(q) - y
            + (1.0 / (12.0 * (r + y)) - 1.0 / (12.0 * r)))


def _digamma_diff(r: float, y: np.ndarray) -> np.ndarray:
    """digamma(r + y) - digamma(r), stable for huge r."""
    if r <= 1e6:
        return digamma(r + y) - digamma(r)
    q = y / r
    return np.log1p(q) + y / (2.0 * r * (r + y)) \
        + (2.0 * r * y + y * y) / (12.0 * r * r * (r + y) * (r + y))


def nb_loglik(beta: np.ndarray, alpha: float, X: np.ndarray, y: np.ndarray,
              offset: np.ndarray | None = None) -> float:
    """NB2 log-likelihood at (beta, alpha)."""
    eta = X @ beta + (offset if offset is not None else 0.0)
    mu = np.exp(eta)
    r = 1.0 / alpha
    ln_amu = math.log(alpha) + eta  # log(alpha * mu) without overflow
    ll = (_lgamma_diff(r, y) - gammaln(y + 1.0)
          + y * ln_amu - (y + r) * np.log1p(alpha * mu))
    return float(ll.sum())


def nb_score(beta: np.ndarray, alpha: float, X: np.ndarray, y: np.ndarray,
             offset: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Analytic gradient: (score in beta, d loglik / d alpha)."""
    eta = X @ beta + (offset if offset is not None else 0.0)
    mu = np.exp(eta)
    denom = 1.0 + alpha * mu
    g_beta = X.T @ ((y - mu) / denom)
    if alpha < 1e-6:
        # alpha -> 0 limit of the dispersion score (the direct expression
        # cancels catastrophically here)
        g_alpha = 0.5 * float(np.sum((y - mu) ** 2 - y))
    else:
        r = 1.0 / alpha
        bracket = np.log1p(alpha * mu) - _digamma_diff(r, y)
        g_alpha = float(np.sum(bracket / (alpha * alpha)
                               + (y - mu) / (alpha * denom)))
    return g_beta, g_alpha


def nb_observed_information(beta: np.ndarray, alpha: float, X: np.ndarray,
                            y: np.ndarray,
                            offset: np.ndarray | None = None) -> np.ndarray:
    """Negative Hessian in beta at fixed alpha."""
    eta = X @ beta + (offset if offset is not None else 0.0)
    mu = np.exp(eta)
    w = mu * (1.0 + alpha * y) / (1.0 + alpha * mu) ** 2
    return (X * w[:, None]).T @ X


def _fisher_information(mu: np.ndarray, alpha: float, X: np.ndarray) -> np.ndarray:
    w = mu / (1.0 + alpha * mu)
    return (X * w[:, None]).T @ X


@dataclass
class FitResult:
    """A fitted NB2 regression."""

    beta: np.ndarray
    alpha: float
    cov: np.ndarray
    loglik: float
    n_obs: int
    converged: bool
    fitted_mu: np.ndarray
    column_names: tuple[str, ...]
    x_matrix: np.ndarray = field(repr=False, default=None)
    y: np.ndarray = field(repr=False, default=None)
    offset: np.ndarray | None = field(repr=False, default=None)
    outer_loglik_trace: list[float] = field(repr=False, default_factory=list)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    def z_values(self, cov: np.ndarray | None = None) -> np.ndarray:
        se = np.sqrt(np.diag(self.cov if cov is None else cov))
        return self.beta / se

    def p_values(self, cov: np.ndarray | None = None) -> np.ndarray:
        return 2.0 * norm.sf(np.abs(self.z_values(cov)))


def _newton_beta(X: np.ndarray, y: np.ndarray, beta: np.ndarray, alpha: float,
                 offset: np.ndarray | None, tol: float = 1e-10,
                 max_iter: int = 60) -> tuple[np.ndarray, float, bool]:
    """Fisher-scoring Newton for beta at fixed alpha, with step halving."""
    ll = nb_loglik(beta, alpha, X, y, offset)
    for _ in range(max_iter):
        eta = X @ beta + (offset if offset is not None else 0.0)
        mu = np.exp(eta)
        score = X.T @ ((y - mu) / (1.0 + alpha * mu))
        info = _fisher_information(mu, alpha, X)
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        scale = 1.0
        for _half in range(30):
            cand = beta + scale * step
            ll_new = nb_loglik(cand, alpha, X, y, offset)
            if np.isfinite(ll_new) and ll_new >= ll - 1e-12:
                break
            scale *= 0.5
        else:
            return beta, ll, True  # no uphill move available: at optimum
        beta = cand
        if abs(ll_new - ll) < tol:
            return beta, ll_new, True
        ll = ll_new
    return beta, ll, False


def fit_nb(X: np.ndarray, y: np.ndarray, offset: np.ndarray | None = None,
           column_names: Sequence[str] | None = None, tol: float = 1e-8,
           max_outer: int = 100,
           alpha_floor: float = ALPHA_FLOOR) -> FitResult:
    """Joint NB2 maximum likelihood over (beta, alpha).

    The dispersion search runs on t = ln(alpha) with a safeguarded
    Newton/secant iteration inside a sign-change bracket of the profile
    score; each profile point solves for beta by Fisher scoring. The default
    covariance is the inverse observed information in beta at the optimum.
    An alpha at the floor means the data are Poisson-compatible.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if column_names is None:
        column_names = tuple(f"x{i}" for i in range(p))
    if len(y) != n:
        raise ValueError("X and y row counts differ")
    if np.linalg.matrix_rank(X) < p:
        raise RankDeficientError("design matrix columns are linearly dependent")
    if y.sum() == 0:
        raise ValueError("response is identically zero; mean model undefined")

    ybar = float(y.mean())
    beta = np.zeros(p)
    has_intercept = np.all(X[:, 0] == 1.0)
    if has_intercept:
        beta[0] = math.log(max(ybar, 1e-8))
        if offset is not None:
            beta[0] -= float(np.mean(offset))

    def profile(t: float, warm: np.ndarray):
        a = math.exp(t)
        b, ll, _ = _newton_beta(X, y, warm.copy(), a, offset)
        _, g_alpha = nb_score(b, a, X, y, offset)
        return ll, b, a * g_alpha  # d loglik / d t

    t_floor = math.log(alpha_floor)
    ll_floor, beta_floor, h_floor = profile(t_floor, beta)
    trace = [ll_floor]
    if h_floor <= 0:
        # no overdispersion signal: Poisson boundary
        return _finalize(X, y, offset, beta_floor, alpha_floor, ll_floor,
                         column_names, converged=True, trace=trace)

    # method-of-moments start from the Poisson fit
    mu0 = np.exp(X @ beta_floor + (offset if offset is not None else 0.0))
    mom = float(np.sum((y - mu0) ** 2 - mu0) / max(np.sum(mu0 ** 2), 1e-300))
    t_cur = math.log(min(max(mom, 1e-4), 1e4))

    # bracket [lo, hi] with score positive at lo, negative at hi
    lo, h_lo = t_floor, h_floor
    hi = None
    ll_cur, beta_cur, h_cur = profile(t_cur, beta_floor)
    evals = [(t_cur, h_cur)]
    best = (ll_cur, beta_cur, t_cur)
    while h_cur > 0:
        lo, h_lo = t_cur, h_cur
        t_cur += 1.0
        if t_cur > math.log(_ALPHA_CEIL):
            warnings.warn("dispersion search hit its upper bound",
                          NotConvergedWarning, stacklevel=2)
            return _finalize(X, y, offset, best[1], math.exp(best[2]), best[0],
                             column_names, converged=False, trace=trace)
        ll_cur, beta_cur, h_cur = profile(t_cur, best[1])
        evals.append((t_cur, h_cur))
        if ll_cur >= best[0]:
            best = (ll_cur, beta_cur, t_cur)
            trace.append(ll_cur)
    hi = t_cur

    converged = False
    ll_prev = ll_cur
    for _ in range(max_outer):
        # secant step from the two most recent score evaluations, safeguarded
        # by bisection inside the bracket
        t_new = None
        if len(evals) >= 2:
            (t1, h1), (t2, h2) = evals[-2], evals[-1]
            if h2 != h1:
                cand = t2 - h2 * (t2 - t1) / (h2 - h1)
                if lo < cand < hi:
                    t_new = cand
        if t_new is None:
            t_new = 0.5 * (lo + hi)
        ll_new, beta_new, h_new = profile(t_new, best[1])
        evals.append((t_new, h_new))
        if h_new > 0:
            lo = t_new
        else:
            hi = t_new
        if ll_new >= best[0]:
            best = (ll_new, beta_new, t_new)
            trace.append(ll_new)
        if abs(ll_new - ll_prev) < tol:
            converged = True
            break
        ll_prev = ll_new
    if not converged:
        warnings.warn("dispersion search did not converge within the "
                      "iteration cap", NotConvergedWarning, stacklevel=2)
    return _finalize(X, y, offset, best[1], math.exp(best[2]), best[0],
                     column_names, converged=converged, trace=trace)


def _finalize(X, y, offset, beta, alpha, loglik, column_names, converged,
              trace) -> FitResult:
    beta, loglik, _ = _newton_beta(X, y, beta, alpha, offset)
    eta = X @ beta + (offset if offset is not None else 0.0)
    if np.any(np.abs(eta) > 30):
        warnings.warn("fitted log-means beyond +-30: quasi-separation likely",
                      SeparationWarning, stacklevel=3)
    mu = np.exp(eta)
    info = nb_observed_information(beta, alpha, X, y, offset)
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        warnings.warn("observed information is singular; covariance from a "
                      "pseudo-inverse", SeparationWarning, stacklevel=3)
        cov = np.linalg.pinv(info)
    if trace and loglik >= trace[-1]:
        trace = trace + [loglik]
    return FitResult(beta=beta, alpha=float(alpha), cov=cov,
                     loglik=float(loglik), n_obs=len(y), converged=converged,
                     fitted_mu=mu, column_names=tuple(column_names),
                     x_matrix=X, y=y, offset=offset,
                     outer_loglik_trace=list(trace))


# --- covariances and effects ---


def cluster_robust_cov(fit: FitResult, cluster_ids: Sequence) -> np.ndarray:
    """Cluster-robust sandwich covariance for beta.

    Bread is the inverse observed information; the meat sums outer products
    of per-cluster score totals, scaled by the small-sample factor
    G/(G-1) * (N-1)/(N-K). Scores are in beta with alpha held at its MLE, so
    with singleton clusters this collapses to the heteroskedasticity-robust
    estimator.
    """
    ids = np.asarray(cluster_ids)
    X, y = fit.x_matrix, fit.y
    n, k = X.shape
    if len(ids) != n:
        raise ValueError("one cluster id per observation required")
    groups, inverse = np.unique(ids, return_inverse=True)
    g = len(groups)
    if g < 2:
        raise SingleClusterError("clustered covariance needs >= 2 clusters")
    mu = fit.fitted_mu
    s = (y - mu) / (1.0 + fit.alpha * mu)
    scores = X * s[:, None]
    summed = np.zeros((g, k))
    np.add.at(summed, inverse, scores)
    meat = summed.T @ summed
    factor = (g / (g - 1.0)) * ((n - 1.0) / (n - k))
    bread = fit.cov  # inverse observed information
    return factor * bread @ meat @ bread


@dataclass(frozen=True)
class AmeResult:
    ame: float
    se: float
    z: float
    p_value: float


def average_marginal_effect(fit: FitResult, column: int | str,
                            cov: np.ndarray | None = None) -> AmeResult:
    """Average marginal effect of one regressor on the expected count.

    For the log link this is beta_k times the mean fitted count; the standard
    error comes from the delta method over the full coefficient vector.
    """
    k = fit.column_names.index(column) if isinstance(column, str) else int(column)
    mu = fit.fitted_mu
    m = float(mu.mean())
    beta_k = float(fit.beta[k])
    ame = beta_k * m
    grad = beta_k * (fit.x_matrix * mu[:, None]).mean(axis=0)
    grad[k] += m
    v = fit.cov if cov is None else cov
    se = float(np.sqrt(grad @ v @ grad))
    z = ame / se if se > 0 else float("nan")
    return AmeResult(ame=ame, se=se, z=z, p_value=2.0 * float(norm.sf(abs(z))))


def percent_of_baseline(ame: float, baseline: float) -> float:
    """Marginal effect as a percentage of the pre-period baseline level."""
    if baseline is None or not np.isfinite(baseline) or baseline <= 0:
        raise UndefinedBaselineError(f"baseline {baseline!r} is not positive")
    return 100.0 * ame / baseline


@dataclass(frozen=True)
class DiDEffect:
    """Interaction-term summary for one (region, mode, direction) model."""

    beta: float
    se_beta: float
    z_beta: float
    p_beta: float
    ame: float
    ame_se: float
    z_ame: float
    p_ame: float
    percent: float | None
    significant: bool


def did_effect(fit: FitResult, baseline: float | None,
               cov: np.ndarray | None = None) -> DiDEffect:
    """Summarize the treatment-post interaction: coefficient, marginal
    effect, and effect as a percent of ``baseline`` (None renders as an
    undefined cell)."""
    v = fit.cov if cov is None else cov
    k = INTERACTION_INDEX
    se = float(np.sqrt(v[k, k]))
    z = float(fit.beta[k]) / se
    p = 2.0 * float(norm.sf(abs(z)))
    ame = average_marginal_effect(fit, k, cov=v)
    percent = None
    if baseline is not None:
        percent = percent_of_baseline(ame.ame, baseline)
    return DiDEffect(beta=float(fit.beta[k]), se_beta=se, z_beta=z, p_beta=p,
                     ame=ame.ame, ame_se=ame.se, z_ame=ame.z,
                     p_ame=ame.p_value, percent=percent,
                     significant=p < 0.05)


# --- baselines ---


class BaselineTable:
    """Pre-period mean response per (region, mode, direction) over treated
    zones; missing keys are undefined cells."""

    def __init__(self, values: dict[tuple[str, str, str], float]):
        self.values = dict(values)

    def get(self, region: str, mode: str, direction: str) -> float | None:
        return self.values.get((region, mode, direction))

    def require(self, region: str, mode: str, direction: str) -> float:
        v = self.get(region, mode, direction)
        if v is None:
            raise UndefinedBaselineError(
                f"no baseline for ({region}, {mode}, {direction})")
        return v


def compute_baselines(panel: ObservationPanel,
                      region_of_zone: dict[str, str]) -> BaselineTable:
    """Mean pre-period response per cell over each region's treated zones,
    in the same units as the regression response so percent-of-baseline is
    unit-free. Cells with no records or an all-zero mean stay undefined."""
    rate = panel.count.astype(float)
    pre = panel.period == 0
    out: dict[tuple[str, str, str], float] = {}
    regions = sorted(set(region_of_zone.values()))
    zone_region = np.array([region_of_zone.get(z, "") for z in panel.zone_ids])
    row_region = zone_region[panel.zone_idx]
    for region in regions:
        in_region = row_region == region
        for mi, mode in enumerate(MODES):
            for di, direction in enumerate(DIRECTIONS):
                mask = pre & in_region & (panel.mode == mi) & (panel.direction == di)
                if not np.any(mask):
                    continue
                mean = float(rate[mask].mean())
                if mean > 0:
                    out[(region, mode, direction)] = mean
    return BaselineTable(out)
