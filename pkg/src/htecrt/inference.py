"""Wald tests for the treatment-by-subgroup interaction.

Reference distributions: normal, or t with degrees of freedom from one of
the small-sample corrections (Satterthwaite, between-within, clusters
minus cluster-level parameters, Fay-Graubard for GEE), or a parametric
bootstrap percentile interval.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import rng as rngmod
from .data import DesignMatrices, get_family
from .gee import GeeFitResult, fay_graubard_adjust
from .glmm import FitError, FitResult, LmmProblem, fit_glmm

DF_METHODS = ("normal", "satterthwaite", "between_within", "n_minus_p", "bootstrap", "fay_graubard")
SMALL_N = 12
FD_STEP = 1e-4

# Small-sample correction by (fitted model, assumed true model, family).
# Gaps in the published selection table (continuous GLMM under flexible
# truth, continuous flexible GLMM under standard truth) use Satterthwaite.
CORRECTION_TABLE = {
    ("flexible", "flexible", "gaussian"): "satterthwaite",
    ("flexible", "flexible", "poisson"): "between_within",
    ("flexible", "flexible", "bernoulli"): "n_minus_p",
    ("standard", "flexible", "gaussian"): "satterthwaite",
    ("standard", "flexible", "poisson"): "n_minus_p",
    ("standard", "flexible", "bernoulli"): "n_minus_p",
    ("flexible", "standard", "gaussian"): "satterthwaite",
    ("flexible", "standard", "poisson"): "bootstrap",
    ("flexible", "standard", "bernoulli"): "bootstrap",
    ("standard", "standard", "gaussian"): "satterthwaite",
    ("standard", "standard", "poisson"): "between_within",
    ("standard", "standard", "bernoulli"): "between_within",
}


class CorrectionError(ValueError):
    """A df method that cannot be applied to the given fit."""


@dataclass(frozen=True)
class HTETest:
    estimate: float
    se: float
    statistic: float
    df_method: str
    df: float | None
    p_value: float | None
    ci_low: float
    ci_high: float
    alpha: float = 0.05
    warning: str | None = None

    @property
    def reject(self) -> bool:
        """Significance decision: p < alpha, or bootstrap CI excluding 0."""
        if self.p_value is None:
            return bool(self.ci_low > 0 or self.ci_high < 0)
        return bool(self.p_value < self.alpha)


@dataclass(frozen=True)
class SubgroupEffect:
    level: int
    estimate: float
    se: float
    df: float | None
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class SubgroupEffects:
    effects: tuple
    df_method: str

    def __getitem__(self, level) -> SubgroupEffect:
        return self.effects[level]

    def __len__(self):
        return len(self.effects)


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    ci_low: float
    ci_high: float
    n_singular_boot: int
    n_failed: int
    estimates: np.ndarray = field(repr=False)  # (B_ok, q) refitted coefficients
    alpha: float = 0.05

    def __iter__(self):
        return iter((self.ci_low, self.ci_high, self.n_singular_boot))

    def interval(self, contrast) -> tuple[float, float]:
        vals = self.estimates @ np.asarray(contrast, dtype=float)
        lo, hi = np.percentile(vals, [100 * self.alpha / 2, 100 * (1 - self.alpha / 2)])
        return float(lo), float(hi)


# ---------------------------------------------------------------------------
# Degrees of freedom
# ---------------------------------------------------------------------------


def n_minus_p_df(design: DesignMatrices) -> float:
    """Clusters minus the number of cluster-level fixed-effect columns."""
    df = design.n_clusters - design.q_between
    if df <= 0:
        raise CorrectionError(f"non-positive degrees of freedom ({df})")
    return float(df)


def cluster_level_columns(design: DesignMatrices, tol: float = 1e-8) -> np.ndarray:
    """Columns whose within-cluster variation lies in the span of the cluster's Z rows.

    Cluster-constant columns always qualify. Under a random slope on the
    subgroup, the subgroup and treatment-by-subgroup columns qualify too:
    their subject-level contrasts are confounded with the cluster-specific
    slopes, so their information accrues at the cluster level.
    """
    out = np.asarray(design.between, dtype=bool).copy()
    if design.n_re == 0 or out.all():
        return out
    order = np.argsort(design.cluster, kind="stable")
    starts = np.flatnonzero(np.r_[True, np.diff(design.cluster[order]) != 0])
    X, Z = design.X[order], design.Z[order]
    scale = np.maximum(np.abs(X).max(axis=0), 1.0)
    ok = np.ones(design.q, dtype=bool)
    for a, b in zip(starts, np.r_[starts[1:], design.n]):
        coef = np.linalg.lstsq(Z[a:b], X[a:b], rcond=None)[0]
        resid = np.abs(X[a:b] - Z[a:b] @ coef).max(axis=0)
        ok &= resid <= tol * scale
    return out | ok


def between_within_df(design: DesignMatrices, contrast) -> float:
    """Between-within denominator df for a contrast of fixed effects.

    Contrasts that only involve cluster-level columns (see
    :func:`cluster_level_columns`) get ``N - q_between``; all others get
    ``n - N - q_within``, with ``q_between`` counting cluster-constant columns.
    """
    c = np.asarray(contrast, dtype=float)
    involved = np.abs(c) > 0
    if np.all(cluster_level_columns(design)[involved]):
        df = design.n_clusters - design.q_between
    else:
        df = design.n - design.n_clusters - design.q_within
    if df <= 0:
        raise CorrectionError(f"non-positive degrees of freedom ({df})")
    return float(df)


def _steps(x):
    return FD_STEP * np.maximum(np.abs(x), 1.0)


def _gradient(f, x):
    h = _steps(x)
    g = np.empty(len(x))
    for k in range(len(x)):
        e = np.zeros(len(x))
        e[k] = h[k]
        g[k] = (f(x + e) - f(x - e)) / (2 * h[k])
    return g


def _hessian(f, x):
    n = len(x)
    h = _steps(x)
    f0 = f(x)
    H = np.empty((n, n))
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = h[i]
        H[i, i] = (f(x + ei) - 2 * f0 + f(x - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(n)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej)
                                 + f(x - ei - ej)) / (4 * h[i] * h[j])
    return H


def satterthwaite_df(fit: FitResult, design: DesignMatrices, contrast,
                     return_flag: bool = False):
    """Satterthwaite df for ``c' beta`` from a gaussian REML fit.

    The variance parameters are ``(theta, sigma)``. The gradient of
    ``c' V(theta, sigma) c`` and the Hessian of the (non-profiled) REML
    deviance are taken by central differences; their covariance is
    ``2 H^-1``. Falls back to ``N - 2`` when the Hessian is not positive
    definite (``return_flag=True`` also returns whether that happened).
    """
    if not isinstance(fit, FitResult) or fit.family.kind != "gaussian" or fit.criterion != "reml":
        raise CorrectionError("Satterthwaite df needs a gaussian REML mixed-model fit")
    if design.random_effects != fit.random_effects:
        design = design.with_random_effects(fit.random_effects)
    c = np.asarray(contrast, dtype=float)
    prob = LmmProblem(design)
    q_theta = len(fit.theta_hat.theta)
    x0 = np.r_[fit.theta_hat.theta, fit.sigma_resid]

    def var_c(x):
        return float(c @ prob.vcov_varpar(x[:q_theta], x[q_theta]) @ c)

    def dev(x):
        return prob.reml_deviance_varpar(x[:q_theta], x[q_theta])

    fallback = float(design.n_clusters - 2)
    v = var_c(x0)
    g = _gradient(var_c, x0)
    H = _hessian(dev, x0)
    try:
        np.linalg.cholesky(H)
        A = 2.0 * np.linalg.inv(H)
    except np.linalg.LinAlgError:
        return (fallback, True) if return_flag else fallback
    denom = float(g @ A @ g)
    if not np.isfinite(denom) or denom <= 0:
        df = np.inf
    else:
        df = max(2.0 * v * v / denom, 1.0)
    return (df, False) if return_flag else df


# ---------------------------------------------------------------------------
# Parametric bootstrap
# ---------------------------------------------------------------------------


def simulate_from_fit(fit: FitResult, design: DesignMatrices, family, rng: np.random.Generator):
    """One outcome vector drawn from a fitted mixed model."""
    family = get_family(family)
    if design.random_effects != fit.random_effects:
        design = design.with_random_effects(fit.random_effects)
    L = fit.theta_hat.cholesky * fit.theta_hat.scale
    b = rng.standard_normal((design.n_clusters, L.shape[0])) @ L.T
    eta = design.X @ fit.beta + np.einsum("nq,nq->n", design.Z, b[design.cluster])
    if family.kind == "gaussian":
        return eta + fit.sigma_resid * rng.standard_normal(design.n)
    mu = family.inverse_link(eta)
    if family.kind == "poisson":
        return rng.poisson(mu).astype(float)
    return (rng.random(design.n) < mu).astype(float)


def parametric_bootstrap_ci(fit: FitResult, design: DesignMatrices, family, B: int = 100,
                            seed: int = 0, alpha: float = 0.05, contrast=None,
                            maxfun: int = 10000) -> BootstrapResult:
    """Percentile CI from ``B`` datasets simulated from the fitted model.

    Replicate ``b`` uses its own stream keyed by ``(seed, b)``. Refits that
    fail to converge are dropped; more than half failing is an error.
    Unpacks as ``(ci_low, ci_high, n_singular_boot)``.
    """
    if not isinstance(fit, FitResult):
        raise CorrectionError("parametric bootstrap needs a mixed-model fit")
    family = get_family(family)
    if design.random_effects != fit.random_effects:
        design = design.with_random_effects(fit.random_effects)
    est, n_sing, n_fail = [], 0, 0
    for b in range(B):
        y = simulate_from_fit(fit, design, family, rngmod.stream(seed, b))
        try:
            refit = fit_glmm(design.with_outcome(y), family, fit.random_effects,
                             criterion=fit.criterion, maxfun=maxfun)
        except (FitError, np.linalg.LinAlgError):
            n_fail += 1
            continue
        if not refit.converged or not np.all(np.isfinite(refit.beta)):
            n_fail += 1
            continue
        n_sing += refit.singular
        est.append(refit.beta)
    if n_fail > B / 2:
        raise FitError(f"{n_fail} of {B} bootstrap refits failed")
    est = np.array(est)
    if contrast is None:
        contrast = _unit(design.q, _interaction_col(design))
    res = BootstrapResult(np.nan, np.nan, int(n_sing), n_fail, est, alpha)
    lo, hi = res.interval(contrast)
    return BootstrapResult(lo, hi, int(n_sing), n_fail, est, alpha)


# ---------------------------------------------------------------------------
# Tests
# ---------------------------------------------------------------------------


def _unit(q, k):
    e = np.zeros(q)
    e[k] = 1.0
    return e


def _interaction_col(design: DesignMatrices) -> int:
    if not design.interaction_cols:
        raise ValueError("design has no interaction column")
    return design.interaction_cols[0]


def _vcov(fit):
    if isinstance(fit, GeeFitResult):
        return fit.vcov_robust
    return fit.vcov_beta


@dataclass(frozen=True)
class ContrastResult:
    estimate: float
    se: float
    statistic: float
    df: float | None
    p_value: float | None
    ci_low: float
    ci_high: float
    warning: str | None = None


def contrast_test(fit, design: DesignMatrices, contrast, df_method: str = "normal",
                  alpha: float = 0.05, bootstrap: BootstrapResult | None = None) -> ContrastResult:
    """Wald test and CI for ``c' beta`` under the chosen reference distribution."""
    if df_method not in DF_METHODS:
        raise CorrectionError(f"unknown df method {df_method!r}")
    c = np.asarray(contrast, dtype=float)
    is_gee = isinstance(fit, GeeFitResult)
    if is_gee and df_method in ("satterthwaite", "bootstrap", "between_within"):
        raise CorrectionError(f"{df_method} is not available for GEE fits")
    if not is_gee and df_method == "fay_graubard":
        raise CorrectionError("the Fay-Graubard correction applies to GEE fits only")
    if not fit.converged:
        raise FitError("cannot test a non-converged fit")

    V = _vcov(fit)
    est = float(c @ fit.beta)
    warn = None
    df = None
    if df_method == "satterthwaite":
        df, fell_back = satterthwaite_df(fit, design, c, return_flag=True)
        if fell_back:
            warn = "Satterthwaite Hessian not positive definite; using N-2 df"
    elif df_method == "between_within":
        df = between_within_df(design, c)
    elif df_method == "n_minus_p":
        df = n_minus_p_df(design)
    elif df_method == "fay_graubard":
        if _is_interaction(c, design) and fit.fg_applicable is not None:
            vfg, dfg, ok = fit.vcov_fg, fit.df_fg, fit.fg_applicable
        else:
            vfg, dfg, ok = fay_graubard_adjust(fit, design, fit.family, contrast=c)
        if ok:
            V = vfg
            df = min(dfg, design.n_clusters - 2.0)
        else:
            df = design.n_clusters - 2.0
            warn = "Fay-Graubard correction not applicable (singular information); using robust SE with N-2 df"
    se = float(np.sqrt(c @ V @ c))
    stat = est / se if se > 0 else (0.0 if est == 0 else np.inf)

    if df_method == "bootstrap":
        if bootstrap is None:
            raise CorrectionError("bootstrap df method needs a BootstrapResult")
        lo, hi = bootstrap.interval(c)
        return ContrastResult(est, se, stat, None, None, lo, hi, warn)
    if df_method == "normal":
        p = 2.0 * stats.norm.sf(abs(stat))
        crit = stats.norm.ppf(1 - alpha / 2)
    else:
        p = 2.0 * stats.t.sf(abs(stat), df)
        crit = stats.t.ppf(1 - alpha / 2, df)
    return ContrastResult(est, se, stat, None if df is None else float(df), float(p),
                          est - crit * se, est + crit * se, warn)


def _is_interaction(c, design):
    k = design.interaction_cols[0] if design.interaction_cols else None
    return k is not None and np.count_nonzero(c) == 1 and c[k] == 1.0


def wald_interaction_test(fit, design: DesignMatrices, df_method: str = "normal",
                          alpha: float = 0.05, bootstrap: BootstrapResult | None = None,
                          B: int = 100, seed: int = 0) -> HTETest:
    """Test ``beta_mod = 0``.

    With more than two subgroup levels a Wald chi-square on the whole
    interaction vector is returned (normal reference only); its
    ``estimate``/``se``/CI fields then hold arrays.
    """
    cols = design.interaction_cols
    if not cols:
        raise ValueError("design has no interaction column")
    if len(cols) > 1:
        if df_method != "normal":
            raise CorrectionError("multi-level interaction tests support df_method='normal' only")
        V = _vcov(fit)[np.ix_(cols, cols)]
        b = fit.beta[list(cols)]
        chi2 = float(b @ np.linalg.solve(V, b))
        p = float(stats.chi2.sf(chi2, len(cols)))
        se = np.sqrt(np.diag(V))
        z = stats.norm.ppf(1 - alpha / 2)
        return HTETest(b, se, chi2, "normal", float(len(cols)), p, b - z * se, b + z * se, alpha)
    if df_method == "bootstrap" and bootstrap is None:
        bootstrap = parametric_bootstrap_ci(fit, design, fit.family, B=B, seed=seed, alpha=alpha)
    r = contrast_test(fit, design, _unit(design.q, cols[0]), df_method, alpha, bootstrap)
    return HTETest(r.estimate, r.se, r.statistic, df_method, r.df, r.p_value, r.ci_low,
                   r.ci_high, alpha, r.warning)


def subgroup_effects(fit, design: DesignMatrices, df_method: str = "normal", alpha: float = 0.05,
                     bootstrap: BootstrapResult | None = None) -> SubgroupEffects:
    """Treatment effect within each subgroup level.

    Level 0 (reference) is ``beta_trt``; level k adds the k-th interaction.
    """
    out = []
    base = _unit(design.q, design.treatment_col)
    contrasts = [base] + [base + _unit(design.q, k) for k in design.interaction_cols]
    for level, c in enumerate(contrasts):
        r = contrast_test(fit, design, c, df_method, alpha, bootstrap)
        out.append(SubgroupEffect(level, r.estimate, r.se, r.df, r.ci_low, r.ci_high))
    return SubgroupEffects(tuple(out), df_method)


def select_correction(model: str, family, n_clusters: int, assumed_truth: str = "flexible") -> str:
    """Reference distribution chosen by the ``auto`` policy.

    ``model`` is ``"flexible"``, ``"standard"`` or ``"gee"``. With at most
    12 clusters the small-sample selection table applies (Fay-Graubard for
    GEE); otherwise the normal reference is used, with a warning below 50
    clusters where no correction has been evaluated.
    """
    family = get_family(family)
    if n_clusters <= SMALL_N:
        if model == "gee":
            return "fay_graubard"
        return CORRECTION_TABLE[(model, assumed_truth, family.kind)]
    if n_clusters < 50:
        warnings.warn(f"{n_clusters} clusters: using the normal reference without a "
                      "small-sample correction", stacklevel=2)
    return "normal"


def alternative_correction(model: str, family, n_clusters: int) -> str:
    """Selection under the standard-GLMM-truth column (reported as metadata)."""
    return select_correction(model, family, n_clusters, assumed_truth="standard")
