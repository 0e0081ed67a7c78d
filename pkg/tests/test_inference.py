import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy import stats

from htecrt import rng as rngmod
from htecrt.data import Dataset, ModelSpec, build_design, design_from_arrays
from htecrt.gee import fit_gee
from htecrt.glmm import FitResult, fit_glmm
from htecrt.inference import (CorrectionError, between_within_df, cluster_level_columns,
                              contrast_test, n_minus_p_df, parametric_bootstrap_ci,
                              satterthwaite_df, select_correction, simulate_from_fit,
                              subgroup_effects, wald_interaction_test)
from htecrt.simulation import builtin_scenario, generate_dataset


def des_data(N, size):
    return Dataset(np.repeat(np.arange(N), size), np.zeros(N * size),
                   np.repeat(np.arange(N) % 2, size), np.tile([0, 1], N * size // 2))


def _fixed_design(N, size):
    return build_design(des_data(N, size), ModelSpec("gaussian", "subgroup_within_cluster"))


def _with_beta(fit, beta):
    return FitResult(np.asarray(beta, float), fit.vcov_beta, fit.theta_hat, fit.sigma_resid,
                     fit.deviance, fit.conditional_modes, True, fit.singular, fit.n_outer_evals,
                     fit.family, fit.random_effects, fit.criterion, fit.column_names)


class TestDegreesOfFreedom:
    def test_n_minus_p(self):
        assert n_minus_p_df(_fixed_design(12, 4)) == 10
        assert n_minus_p_df(_fixed_design(50, 2)) == 48

    def test_n_minus_p_cluster_covariate(self):
        N, m = 12, 4
        cl = np.repeat(np.arange(N), m)
        data = Dataset(cl, np.zeros(N * m), cl % 2, np.tile([0, 1], N * m // 2),
                       (cl % 3).astype(float)[:, None], ("site_type",))
        des = build_design(data, ModelSpec("gaussian", "cluster_intercept", ("site_type",)))
        assert n_minus_p_df(des) == N - 3

    def test_between_within(self):
        des = _fixed_design(12, 100)
        inter = np.zeros(4)
        inter[3] = 1
        trt = np.zeros(4)
        trt[1] = 1
        std = des.with_random_effects("cluster_intercept")
        assert between_within_df(std, inter) == 1200 - 12 - 2
        assert between_within_df(std, trt) == 10

    def test_random_slope_makes_interaction_cluster_level(self):
        des = _fixed_design(12, 100)
        assert list(cluster_level_columns(des)) == [True, True, True, True]
        assert list(cluster_level_columns(des.with_random_effects("cluster_intercept"))) == \
            [True, True, False, False]
        inter = np.zeros(4)
        inter[3] = 1
        assert between_within_df(des, inter) == 12 - 2
        ind = build_design(des_data(12, 100), ModelSpec("gaussian", "subgroup_within_cluster",
                                                        re_parameterization="indicator"))
        assert between_within_df(ind, inter) == 12 - 2

    def test_subject_covariate_stays_within(self):
        data = des_data(12, 10)
        x = np.random.default_rng(0).normal(size=(data.n, 1))
        d2 = Dataset(data.cluster, data.outcome, data.treatment, data.subgroup, x, ("age",))
        des = build_design(d2, ModelSpec("gaussian", "subgroup_within_cluster", ("age",)))
        c = np.zeros(des.q)
        c[des.column_names.index("age")] = 1
        assert between_within_df(des, c) == 120 - 12 - des.q_within

    def test_nonpositive_df(self):
        with pytest.raises(CorrectionError):
            n_minus_p_df(_fixed_design(2, 4))

    @pytest.mark.parametrize("N", [4, 12, 50])
    def test_between_within_agrees_with_n_minus_p_on_trt(self, N):
        des = _fixed_design(N, 6)
        c = np.zeros(4)
        c[1] = 1
        assert between_within_df(des, c) == n_minus_p_df(des) == N - 2


class TestSatterthwaite:
    def test_balanced_one_way_between_contrast(self):
        rng = np.random.default_rng(4)
        N, m = 10, 8
        cl = np.repeat(np.arange(N), m)
        trt = np.repeat(np.arange(N) % 2, m)
        X = np.column_stack([np.ones(N * m), trt])
        y = 0.5 * trt + rng.normal(0, 0.8, N)[cl] + rng.normal(0, 1.0, N * m)
        des = design_from_arrays(X, y, cl)
        fit = fit_glmm(des, "gaussian")
        assert not fit.singular
        assert satterthwaite_df(fit, des, [0, 1]) == pytest.approx(N - 2, abs=0.5)

    def test_zero_variance_limit_is_ols_df(self):
        rng = np.random.default_rng(2)
        N, m = 10, 20
        cl = np.repeat(np.arange(N), m)
        X = np.column_stack([np.ones(N * m), np.repeat(np.arange(N) % 2, m), rng.normal(size=N * m)])
        y = rng.normal(size=N * m)
        des = design_from_arrays(X, y, cl)
        fit = fit_glmm(des, "gaussian")
        fit0 = FitResult(fit.beta, fit.vcov_beta, type(fit.theta_hat)(np.zeros(1), "cluster_intercept",
                         fit.sigma_resid), fit.sigma_resid, fit.deviance, fit.conditional_modes, True,
                         True, 0, fit.family, fit.random_effects, fit.criterion)
        df = satterthwaite_df(fit0, des, [0, 0, 1])
        assert df == pytest.approx(N * m - 3, rel=0.05)

    def test_requires_gaussian(self, poisson_trial):
        _, des = poisson_trial
        fit = fit_glmm(des, "poisson")
        with pytest.raises(CorrectionError):
            wald_interaction_test(fit, des, "satterthwaite")

    def test_against_lmer_style_reference(self, gaussian_trial):
        """Independent finite-difference evaluation with a different step."""
        from htecrt.glmm import LmmProblem
        _, des = gaussian_trial
        fit = fit_glmm(des, "gaussian")
        c = np.zeros(4)
        c[3] = 1
        prob = LmmProblem(des)
        x0 = np.r_[fit.theta_hat.theta, fit.sigma_resid]
        f = lambda x: c @ prob.vcov_varpar(x[:3], x[3]) @ c  # noqa: E731
        d = lambda x: prob.reml_deviance_varpar(x[:3], x[3])  # noqa: E731
        h = 1e-3
        E = np.eye(4) * h
        g = np.array([(f(x0 + E[i]) - f(x0 - E[i])) / (2 * h) for i in range(4)])
        H = np.array([[(d(x0 + E[i] + E[j]) - d(x0 + E[i] - E[j]) - d(x0 - E[i] + E[j])
                        + d(x0 - E[i] - E[j])) / (4 * h * h) for j in range(4)] for i in range(4)])
        ref = 2 * f(x0) ** 2 / (g @ (2 * np.linalg.inv(H)) @ g)
        assert satterthwaite_df(fit, des, c) == pytest.approx(ref, rel=0.01)


class TestWaldTest:
    def test_zero_estimate(self, gaussian_trial):
        _, des = gaussian_trial
        fit = _with_beta(fit_glmm(des, "gaussian"), [0.1, 0.2, 0.3, 0.0])
        for method in ("normal", "n_minus_p", "between_within", "satterthwaite"):
            t = wald_interaction_test(fit, des, method)
            assert t.statistic == 0 and t.p_value == pytest.approx(1.0)

    def test_n_minus_p_uses_ten_df(self, poisson_trial):
        _, des = poisson_trial
        t = wald_interaction_test(fit_glmm(des, "poisson"), des, "n_minus_p")
        assert t.df == 10
        assert t.p_value == pytest.approx(2 * stats.t.sf(abs(t.statistic), 10))

    def test_gee_corrections(self, poisson_trial):
        _, des = poisson_trial
        fit = fit_gee(des, "poisson")
        fg = wald_interaction_test(fit, des, "fay_graubard")
        rob = wald_interaction_test(fit, des, "normal")
        assert fg.se >= rob.se
        assert fg.df <= des.n_clusters - 2
        with pytest.raises(CorrectionError):
            wald_interaction_test(fit, des, "satterthwaite")

    def test_gee_fallback_when_fg_not_applicable(self, poisson_trial):
        _, des = poisson_trial
        fit = fit_gee(des, "poisson")
        broken = type(fit)(fit.beta, fit.vcov_model, fit.vcov_robust, None, False, True, None,
                           fit.dispersion, fit.n_clusters, fit.column_names, fit.family)
        t = wald_interaction_test(broken, des, "fay_graubard")
        assert t.df == des.n_clusters - 2 and t.warning
        k = des.interaction_cols[0]
        assert t.se == pytest.approx(np.sqrt(fit.vcov_robust[k, k]))

    def test_multilevel_chi_square(self):
        rng = np.random.default_rng(0)
        N, m = 10, 30
        cl = np.repeat(np.arange(N), m)
        g = rng.integers(0, 3, N * m)
        data = Dataset(cl, rng.normal(size=N * m), np.repeat(np.arange(N) % 2, m), g)
        des = build_design(data, ModelSpec("gaussian", "cluster_intercept"))
        fit = fit_glmm(des, "gaussian")
        t = wald_interaction_test(fit, des)
        assert t.df == 2 and 0 <= t.p_value <= 1
        with pytest.raises(CorrectionError):
            wald_interaction_test(fit, des, "n_minus_p")


@settings(max_examples=200, deadline=None)
@given(st.floats(-6, 6), st.floats(0.05, 3), st.floats(1, 500), st.floats(0.01, 0.2))
def test_ci_p_duality(est, se, df, alpha):
    from htecrt.inference import ContrastResult  # noqa: F401
    crit = stats.t.ppf(1 - alpha / 2, df)
    lo, hi = est - crit * se, est + crit * se
    p = 2 * stats.t.sf(abs(est / se), df)
    assume(abs(p - alpha) > 1e-9)
    assert (lo > 0 or hi < 0) == (p < alpha)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["normal", "n_minus_p", "between_within"]))
def test_ci_p_duality_on_fits(seed, method):
    from conftest import small_trial
    data = small_trial("poisson", 8, 20, seed=seed)
    des = build_design(data, ModelSpec("poisson", "cluster_intercept"))
    fit = fit_glmm(des, "poisson")
    assume(fit.converged)
    t = wald_interaction_test(fit, des, method)
    assume(abs(t.p_value - 0.05) > 1e-9)
    assert (t.ci_low > 0 or t.ci_high < 0) == (t.p_value < 0.05)


@given(st.floats(0.1, 8), st.floats(1, 200), st.floats(0, 200))
def test_p_monotone_in_df(t, df1, extra):
    assert 2 * stats.t.sf(t, df1) >= 2 * stats.t.sf(t, df1 + extra)


class TestSubgroupEffects:
    def test_reference_is_trt(self, gaussian_trial):
        _, des = gaussian_trial
        fit = fit_glmm(des, "gaussian")
        eff = subgroup_effects(fit, des, "satterthwaite")
        assert eff[0].estimate == fit.beta[1]
        assert eff[1].estimate == pytest.approx(fit.beta[1] + fit.beta[3])

    def test_zero_interaction(self, gaussian_trial):
        _, des = gaussian_trial
        fit = _with_beta(fit_glmm(des, "gaussian"), [0.1, 0.2, 0.3, 0.0])
        eff = subgroup_effects(fit, des)
        assert eff[0].estimate == eff[1].estimate == 0.2

    def test_swap_reference_level(self, trial):
        data = trial("poisson", 10, 30, seed=3)
        swapped = Dataset(data.cluster, data.outcome, data.treatment, 1 - data.subgroup)
        for model in ("gee", "standard"):
            a_des = build_design(data, ModelSpec("poisson", "cluster_intercept"))
            b_des = build_design(swapped, ModelSpec("poisson", "cluster_intercept"))
            if model == "gee":
                a, b = fit_gee(a_des, "poisson"), fit_gee(b_des, "poisson")
                tol = 1e-8
            else:
                a, b = fit_glmm(a_des, "poisson"), fit_glmm(b_des, "poisson")
                tol = 1e-5
            ea, eb = subgroup_effects(a, a_des), subgroup_effects(b, b_des)
            assert ea[0].estimate == pytest.approx(eb[1].estimate, abs=tol)
            assert ea[1].estimate == pytest.approx(eb[0].estimate, abs=tol)
            assert ea[0].se == pytest.approx(eb[1].se, abs=tol)


@pytest.fixture(scope="module")
def boot_setup():
    data = generate_dataset(builtin_scenario(3, "gaussian", 12), 2)
    des = build_design(data, ModelSpec("gaussian", "cluster_intercept"))
    return des, fit_glmm(des, "gaussian")


class TestBootstrap:

    def test_deterministic(self, boot_setup):
        des, fit = boot_setup
        a = parametric_bootstrap_ci(fit, des, "gaussian", B=20, seed=7)
        b = parametric_bootstrap_ci(fit, des, "gaussian", B=20, seed=7)
        assert (a.ci_low, a.ci_high) == (b.ci_low, b.ci_high)
        lo, hi, nsing = a
        assert lo < hi and nsing >= 0

    def test_order_invariance(self, boot_setup):
        des, fit = boot_setup
        res = parametric_bootstrap_ci(fit, des, "gaussian", B=15, seed=3)
        est = []
        for b in reversed(range(15)):
            y = simulate_from_fit(fit, des, "gaussian", rngmod.stream(3, b))
            est.append(fit_glmm(des.with_outcome(y), "gaussian").beta[3])
        lo, hi = np.percentile(est, [2.5, 97.5])
        assert (lo, hi) == pytest.approx((res.ci_low, res.ci_high), abs=1e-12)

    def test_width_matches_normal_theory_at_zero_variance(self):
        rng = np.random.default_rng(1)
        N, m = 40, 100
        cl = np.repeat(np.arange(N), m)
        data = Dataset(cl, rng.normal(size=N * m), np.repeat(np.arange(N) % 2, m),
                       rng.integers(0, 2, N * m))
        des = build_design(data, ModelSpec("gaussian", "cluster_intercept"))
        fit = fit_glmm(des, "gaussian")
        fit0 = FitResult(fit.beta, fit.vcov_beta, type(fit.theta_hat)(np.zeros(1), "cluster_intercept",
                         fit.sigma_resid), fit.sigma_resid, fit.deviance, fit.conditional_modes, True,
                         True, 0, fit.family, fit.random_effects, fit.criterion)
        boot = parametric_bootstrap_ci(fit0, des, "gaussian", B=100, seed=5)
        normal = wald_interaction_test(fit0, des, "normal")
        ratio = (boot.ci_high - boot.ci_low) / (normal.ci_high - normal.ci_low)
        assert abs(ratio - 1) < 0.25

    def test_bootstrap_decision(self, boot_setup):
        des, fit = boot_setup
        t = wald_interaction_test(fit, des, "bootstrap", B=20, seed=1)
        assert t.p_value is None
        assert t.reject == (t.ci_low > 0 or t.ci_high < 0)


class TestSelection:
    @pytest.mark.parametrize("model,family,expected", [
        ("flexible", "gaussian", "satterthwaite"), ("flexible", "poisson", "between_within"),
        ("flexible", "bernoulli", "n_minus_p"), ("standard", "poisson", "n_minus_p"),
        ("standard", "bernoulli", "n_minus_p"), ("gee", "poisson", "fay_graubard")])
    def test_flexible_truth_column(self, model, family, expected):
        assert select_correction(model, family, 12) == expected

    @pytest.mark.parametrize("model,family,expected", [
        ("flexible", "poisson", "bootstrap"), ("flexible", "bernoulli", "bootstrap"),
        ("standard", "poisson", "between_within"), ("standard", "bernoulli", "between_within"),
        ("flexible", "gaussian", "satterthwaite"), ("standard", "gaussian", "satterthwaite")])
    def test_standard_truth_column(self, model, family, expected):
        assert select_correction(model, family, 12, "standard") == expected

    def test_large_n(self):
        assert select_correction("flexible", "poisson", 50) == "normal"
        with pytest.warns(UserWarning):
            assert select_correction("flexible", "poisson", 30) == "normal"

    def test_contrast_test_rejects_unknown(self, gaussian_trial):
        _, des = gaussian_trial
        with pytest.raises(CorrectionError):
            contrast_test(fit_glmm(des, "gaussian"), des, np.ones(4), "kenward_roger")
