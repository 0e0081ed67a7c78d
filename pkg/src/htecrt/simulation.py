"""Monte Carlo harness for type I error of the interaction test.

Each replicate generates one trial, fits the flexible GLMM, the standard
GLMM and independence GEE, derives the two-step result, and tests the
interaction with the ``auto`` small-sample correction for each model. Per
replicate records are aggregated into bias, empirical SD, rejection rate
and singular-fit counts per model.
"""

from __future__ import annotations

import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod
from .data import Dataset, ModelSpec, build_design, get_family
from .gee import fit_gee
from .glmm import FitError, fit_glmm
from .inference import CorrectionError, select_correction, wald_interaction_test

SCHEMA_VERSION = 1
MODELS = ("flexible", "two_step", "standard", "gee")
VARYING_SIZES = (25, 50, 100, 150, 300)
MAX_FAIL_FRACTION = 0.10

# family -> (beta, scenario-1 Sigma, scenario-4 sigma^2)
_TABLE = {
    "gaussian": ((0.0, 0.5, 0.3, 0.0), ((0.2, 0.13), (0.13, 0.1)), 0.2),
    "poisson": ((-1.0, -0.07, -0.5, 0.0), ((0.5, 0.25), (0.25, 0.5)), 0.5),
    "bernoulli": ((-1.66, -0.32, -0.08, 0.0), ((0.25, 0.18), (0.18, 0.5)), 0.5),
}
RESID_VAR = 0.64


class SimulationError(RuntimeError):
    pass


class ScenarioError(ValueError):
    """Combination not defined by the built-in scenario table."""


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation setting.

    ``Sigma`` is the covariance of the subgroup-specific cluster effects
    ``(U_1, U_0)`` under flexible truth; ``sigma2`` the random-intercept
    variance under standard truth. ``assumed_truth`` picks the column of the
    small-sample correction table and defaults to ``true_model``.
    """

    family: str
    n_clusters: int
    cluster_sizes: int | tuple = 100
    true_model: str = "flexible"
    beta_true: tuple = (0.0, 0.0, 0.0, 0.0)
    Sigma: tuple | None = None
    sigma2: float | None = None
    resid_var: float = RESID_VAR
    n_reps: int = 1000
    base_seed: int = 0
    alpha: float = 0.05
    scenario_id: int | str = "custom"
    assumed_truth: str | None = None
    boot_reps: int = 100

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "family", get_family(self.family).kind)
        if self.true_model not in ("flexible", "standard"):
            raise ScenarioError(f"unknown true model {self.true_model!r}")
        if self.assumed_truth is None:
            set_(self, "assumed_truth", self.true_model)
        if self.n_clusters < 2 or self.n_clusters % 2:
            raise ScenarioError("n_clusters must be even (balanced arms) and at least 2")
        if self.n_reps < 1:
            raise ScenarioError("n_reps must be positive")
        if not isinstance(self.cluster_sizes, (int, np.integer)):
            set_(self, "cluster_sizes", tuple(int(s) for s in self.cluster_sizes))
        if len(self.beta_true) != 4:
            raise ScenarioError("beta_true must be (b0, b_trt, b_gr, b_mod)")
        set_(self, "beta_true", tuple(float(b) for b in self.beta_true))
        if self.true_model == "flexible":
            S = np.asarray(self.Sigma if self.Sigma is not None else np.zeros((2, 2)), dtype=float)
            if S.shape != (2, 2) or not np.allclose(S, S.T) or np.linalg.eigvalsh(S).min() < -1e-12:
                raise ScenarioError("Sigma must be a symmetric positive semi-definite 2x2 matrix")
            set_(self, "Sigma", tuple(map(tuple, S.tolist())))
        else:
            if self.sigma2 is None or self.sigma2 < 0:
                raise ScenarioError("standard truth needs sigma2 >= 0")
        if self.resid_var <= 0:
            raise ScenarioError("resid_var must be positive")

    @property
    def sizes(self) -> np.ndarray:
        """Per-cluster sizes; lists are tiled cyclically over cluster index."""
        if isinstance(self.cluster_sizes, (int, np.integer)):
            return np.full(self.n_clusters, int(self.cluster_sizes))
        base = np.asarray(self.cluster_sizes, dtype=np.int64)
        return np.resize(base, self.n_clusters)


def builtin_scenario(scenario_id: int, family, n_clusters: int, varying: bool = False,
                     n_reps: int = 1000, base_seed: int = 0) -> ScenarioConfig:
    """The four built-in settings (interaction coefficient zero throughout)."""
    kind = get_family(family).kind
    beta, sigma1, s2 = _TABLE[kind]
    sid = int(scenario_id)
    valid = {1: ({50, 100}, False), 2: ({50, 100}, False), 3: ({12}, None), 4: ({50, 12}, None)}
    if sid not in valid:
        raise ScenarioError(f"unknown scenario {scenario_id!r}")
    allowed_n, allowed_vary = valid[sid]
    if n_clusters not in allowed_n:
        raise ScenarioError(f"scenario {sid} is defined for N in {sorted(allowed_n)}")
    if allowed_vary is False and varying:
        raise ScenarioError(f"scenario {sid} has fixed cluster sizes")
    if sid == 4 and ((n_clusters == 50) == varying):
        raise ScenarioError("scenario 4 uses N=50 fixed sizes or N=12 varying sizes")
    sizes = VARYING_SIZES if varying else 100
    common = dict(family=kind, n_clusters=n_clusters, cluster_sizes=sizes, beta_true=beta,
                  n_reps=n_reps, base_seed=base_seed, scenario_id=sid)
    if sid == 4:
        return ScenarioConfig(true_model="standard", sigma2=s2, **common)
    S = np.asarray(sigma1) / (10.0 if sid == 2 else 1.0)
    return ScenarioConfig(true_model="flexible", Sigma=S, **common)


def _draw_effects(gen, S, N):
    try:
        return gen.multivariate_normal(np.zeros(2), S, size=N, method="cholesky")
    except np.linalg.LinAlgError:
        # singular Sigma: symmetric square root of the PSD matrix
        w, V = np.linalg.eigh(S)
        return gen.standard_normal((N, 2)) @ (V * np.sqrt(np.clip(w, 0, None))).T


def generate_dataset(config: ScenarioConfig, rep_index: int) -> Dataset:
    """Simulate one trial.

    Sub-streams of ``(base_seed, rep_index)``: treatment permutation,
    subgroup draws, random effects, outcome noise.
    """
    N = config.n_clusters
    if N % 2:
        raise ScenarioError("n_clusters must be even")
    seed, r = config.base_seed, rep_index
    labels = np.repeat([0, 1], N // 2)
    arm = rngmod.stream(seed, r, rngmod.TREATMENT).permutation(labels)
    sizes = config.sizes
    cluster = np.repeat(np.arange(N), sizes)
    n = cluster.shape[0]
    sex = rngmod.stream(seed, r, rngmod.SUBGROUP).binomial(1, 0.5, n)
    g_re = rngmod.stream(seed, r, rngmod.RANDOM_EFFECTS)
    if config.true_model == "flexible":
        U = _draw_effects(g_re, np.asarray(config.Sigma), N)
        re = np.where(sex == 1, U[cluster, 0], U[cluster, 1])
    else:
        re = (math.sqrt(config.sigma2) * g_re.standard_normal(N))[cluster]
    b0, bt, bg, bm = config.beta_true
    trt = arm[cluster]
    eta = b0 + bt * trt + bg * sex + bm * trt * sex + re
    g_y = rngmod.stream(seed, r, rngmod.NOISE)
    fam = get_family(config.family)
    if fam.kind == "gaussian":
        y = eta + math.sqrt(config.resid_var) * g_y.standard_normal(n)
    elif fam.kind == "poisson":
        y = g_y.poisson(np.exp(eta)).astype(float)
    else:
        y = (g_y.random(n) < fam.inverse_link(eta)).astype(float)
    return Dataset(cluster, y, trt, sex, n_clusters=N, subgroup_levels=2)


# ---------------------------------------------------------------------------
# Replicates
# ---------------------------------------------------------------------------


def _record(config, rep, model, fit, test=None, seconds=0.0, singular=False,
            fallback=False, correction=None, flags=None, error=None):
    ok = test is not None
    rec = {
        "scenario": config.scenario_id,
        "family": config.family,
        "n_clusters": config.n_clusters,
        "base_seed": config.base_seed,
        "rep_index": rep,
        "model": model,
        "truth": config.beta_true[3],
        "alpha": config.alpha,
        "correction": correction,
        "converged": ok,
        "estimate": test.estimate if ok else None,
        "se": test.se if ok else None,
        "p": test.p_value if ok else None,
        "df": test.df if ok else None,
        "ci_low": test.ci_low if ok else None,
        "ci_high": test.ci_high if ok else None,
        "reject": test.reject if ok else None,
        "singular": bool(singular),
        "fallback_used": bool(fallback),
        "singular_flexible": bool(flags[0]) if flags else False,
        "singular_standard": bool(flags[1]) if flags else False,
        "seconds": seconds,
    }
    if error:
        rec["error"] = error
    return {k: (float(v) if isinstance(v, np.floating) else v) for k, v in rec.items()}


def _test(model, fit, design, config, correction, key):
    if fit is None or not fit.converged:
        return None, "fit did not converge"
    seed = rngmod.derive_seed(config.base_seed, key, rngmod.BOOTSTRAP, MODELS.index(model))
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return wald_interaction_test(fit, design, correction, config.alpha,
                                         B=config.boot_reps, seed=seed), None
    except (FitError, CorrectionError, np.linalg.LinAlgError) as exc:
        return None, str(exc)


def _safe_fit(fn, *args, **kw):
    t0 = time.perf_counter()
    try:
        fit = fn(*args, **kw)
    except (FitError, np.linalg.LinAlgError, ValueError) as exc:
        return None, time.perf_counter() - t0, str(exc)
    return fit, time.perf_counter() - t0, None


def run_replicate(config: ScenarioConfig, rep_index: int, with_timing: bool = True) -> list:
    """All model records for one replicate (timing is wall clock, optional)."""
    data = generate_dataset(config, rep_index)
    fam = get_family(config.family)
    design = build_design(data, ModelSpec(fam, "subgroup_within_cluster"))
    std_design = design.with_random_effects("cluster_intercept")
    N = config.n_clusters
    truth = config.assumed_truth

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        corr = {m: select_correction(m, fam, N, truth) for m in ("flexible", "standard", "gee")}

    flex, t_flex, e_flex = _safe_fit(fit_glmm, design, fam)
    std, t_std, e_std = _safe_fit(fit_glmm, std_design, fam)
    gee, t_gee, e_gee = _safe_fit(fit_gee, design, fam)
    flags = (bool(flex is not None and flex.singular), bool(std is not None and std.singular))

    out = []
    tests = {}
    for model, fit, des, secs, err in (("flexible", flex, design, t_flex, e_flex),
                                       ("standard", std, std_design, t_std, e_std),
                                       ("gee", gee, design, t_gee, e_gee)):
        t0 = time.perf_counter()
        c = corr[model]
        test, terr = (None, err) if err else _test(model, fit, des, config, c, rep_index)
        secs += time.perf_counter() - t0
        tests[model] = (test, secs)
        sing = bool(getattr(fit, "singular", False)) if fit is not None else False
        out.append(_record(config, rep_index, model, fit, test, secs if with_timing else 0.0,
                           sing, False, c, flags, terr))

    # two-step: flexible unless singular or failed, then standard
    flex_ok = flex is not None and flex.converged and not flex.singular
    src = "flexible" if flex_ok else "standard"
    test, secs = tests[src]
    if not flex_ok:
        secs += tests["flexible"][1]
    src_rec = out[0] if flex_ok else out[1]
    rec = dict(src_rec, model="two_step", fallback_used=not flex_ok,
               seconds=secs if with_timing else 0.0)
    out.insert(1, rec)
    return out


def _run_chunk(args):
    config, reps, with_timing = args
    return [rec for r in reps for rec in run_replicate(config, r, with_timing)]


def run_replicates(config: ScenarioConfig, workers: int = 1, with_timing: bool = True) -> list:
    """Records for every replicate, ordered by (rep_index, model)."""
    reps = list(range(config.n_reps))
    if workers <= 1:
        records = _run_chunk((config, reps, with_timing))
    else:
        chunks = [reps[k::workers] for k in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            records = [rec for part in ex.map(_run_chunk, [(config, c, with_timing) for c in chunks])
                       for rec in part]
    return sort_records(records)


def sort_records(records: list) -> list:
    order = {m: k for k, m in enumerate(MODELS)}
    return sorted(records, key=lambda r: (r.get("base_seed", 0), r["rep_index"],
                                          order.get(r["model"], len(order))))


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SummaryRow:
    model: str
    bias: float | None
    esd: float | None
    type1_rate: float | None
    n_singular_flexible: int
    n_singular_standard: int
    n_singular: int
    n_failed_fits: int
    n_success: int
    n_fallback: int
    correction_used: str | None
    comparable: bool = True


@dataclass(frozen=True)
class SimulationSummary:
    scenario: object
    family: str
    n_clusters: int
    n_reps: int
    rows: tuple = field(default_factory=tuple)

    def row(self, model: str) -> SummaryRow:
        for r in self.rows:
            if r.model == model:
                return r
        raise KeyError(model)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "scenario": self.scenario,
            "family": self.family,
            "n_clusters": self.n_clusters,
            "n_reps": self.n_reps,
            "rows": [{k: _clean(v) for k, v in r.__dict__.items()} for r in self.rows],
        }


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def summarize(estimates, p_values, flags=(), truth: float = 0.0, alpha: float = 0.05,
              rejects=None) -> dict:
    """Bias, empirical SD (n-1 denominator), rejection rate and flag count.

    ``rejects`` overrides the ``p < alpha`` rule (bootstrap CI decisions).
    """
    est = np.asarray(estimates, dtype=float)
    if est.size == 0:
        raise ValueError("no estimates to summarize")
    if rejects is None:
        rejects = np.asarray(p_values, dtype=float) < alpha
    rej = np.asarray(rejects, dtype=bool)
    if rej.shape != est.shape:
        raise ValueError("estimates and decisions differ in length")
    return {
        "bias": float(math.fsum(est) / est.size - truth),
        "esd": float(np.std(est, ddof=1)) if est.size > 1 else float("nan"),
        "type1_rate": float(rej.mean()),
        "n_flagged": int(np.sum(np.asarray(flags, dtype=bool))),
    }


def _unique(records, key):
    vals = {repr(r.get(key)) for r in records}
    return records[0].get(key) if len(vals) == 1 else "mixed"


def summarize_records(records: list) -> SimulationSummary:
    """Aggregate per-replicate records (order independent)."""
    if not records:
        raise ValueError("no records")
    records = sort_records(records)
    fam = _unique(records, "family")
    n_reps = len({(r.get("base_seed", 0), r["rep_index"]) for r in records})
    rows = []
    for model in MODELS:
        recs = [r for r in records if r["model"] == model]
        if not recs:
            continue
        ok = [r for r in recs if r.get("converged") and r.get("estimate") is not None]
        corr = sorted({r.get("correction") or "" for r in ok})
        base = dict(model=model,
                    n_singular_flexible=sum(bool(r.get("singular_flexible")) for r in recs),
                    n_singular_standard=sum(bool(r.get("singular_standard")) for r in recs),
                    n_singular=sum(bool(r.get("singular")) for r in recs),
                    n_failed_fits=len(recs) - len(ok), n_success=len(ok),
                    n_fallback=sum(bool(r.get("fallback_used")) for r in recs),
                    correction_used="+".join(corr) if corr else None,
                    comparable=fam != "bernoulli")
        if ok:
            s = summarize([r["estimate"] for r in ok], None, truth=float(ok[0].get("truth", 0.0)),
                          rejects=[bool(r["reject"]) for r in ok])
            rows.append(SummaryRow(bias=s["bias"], esd=s["esd"], type1_rate=s["type1_rate"], **base))
        else:
            rows.append(SummaryRow(bias=None, esd=None, type1_rate=None, **base))
    return SimulationSummary(_unique(records, "scenario"), fam, _unique(records, "n_clusters"),
                             n_reps, tuple(rows))


def run_scenario(config: ScenarioConfig, workers: int = 1, return_records: bool = False,
                 with_timing: bool = True):
    """Run all replicates and aggregate.

    Raises :class:`SimulationError` when more than 10% of any model's fits
    fail.
    """
    records = run_replicates(config, workers, with_timing)
    summary = summarize_records(records)
    for row in summary.rows:
        if row.n_failed_fits > MAX_FAIL_FRACTION * config.n_reps:
            raise SimulationError(f"{row.n_failed_fits} of {config.n_reps} {row.model} fits failed")
    return (summary, records) if return_records else summary


def with_reps(config: ScenarioConfig, n_reps: int, base_seed: int | None = None) -> ScenarioConfig:
    kw = {"n_reps": n_reps}
    if base_seed is not None:
        kw["base_seed"] = base_seed
    return replace(config, **kw)
