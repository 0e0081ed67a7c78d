"""Command-line interface: ``fit``, ``simulate`` and ``report``.

Exit codes: 0 success, 2 invalid input or data, 3 model fit failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from .data import DataError, ModelSpec, build_design, get_family, load_dataset
from .gee import fit_gee
from .glmm import FitError, fit_glmm
from .inference import (CorrectionError, alternative_correction, contrast_test,
                        parametric_bootstrap_ci, select_correction, subgroup_effects,
                        wald_interaction_test)
from .simulation import (MODELS, SCHEMA_VERSION, ScenarioError, SimulationError,
                         builtin_scenario, run_replicates, summarize_records)

EXIT_OK, EXIT_DATA, EXIT_FIT = 0, 2, 3
CORRECTIONS = ("auto", "satterthwaite", "between-within", "n-minus-p", "bootstrap",
               "fay-graubard", "none")
FIT_MODELS = {"flexible-glmm": "flexible", "glmm": "standard", "gee": "gee"}


class UsageError(Exception):
    pass


def _warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def _fmt(v, nd=3):
    if v is None:
        return "-"
    if isinstance(v, (bool, np.bool_)):
        return "yes" if v else "no"
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(v)
    if not math.isfinite(v):
        return "inf" if v > 0 else ("nan" if v != v else "-inf")
    return f"{v:.{nd}f}"


def _table(header, rows) -> str:
    cells = [list(header)] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[k]) for r in cells) for k in range(len(header))]
    lines = ["  ".join(c.rjust(w) if k else c.ljust(w) for k, (c, w) in enumerate(zip(r, widths)))
             for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _num(v):
    """JSON-safe float (non-finite values become null)."""
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def _resolve_correction(requested: str, model: str, family, n_clusters: int, fit, design):
    """Map a requested correction onto one the fit supports, warning on fallback."""
    auto = select_correction(model, family, n_clusters)
    if requested == "auto":
        return auto
    name = "normal" if requested == "none" else requested.replace("-", "_")
    if model == "gee" and name in ("satterthwaite", "between_within", "bootstrap"):
        _warn(f"{requested} is not available for GEE; using {auto}")
        return auto
    if model != "gee" and name == "fay_graubard":
        _warn(f"fay-graubard applies to GEE only; using {auto} for the {model} GLMM")
        return auto
    if name == "satterthwaite" and get_family(family).kind != "gaussian":
        _warn(f"satterthwaite needs a gaussian model; using {auto}")
        return auto
    return name


def _fit_block(model, design, family, args):
    fam = get_family(family)
    if model == "gee":
        fit = fit_gee(design, fam)
        des = design
    else:
        re = "subgroup_within_cluster" if model == "flexible" else "cluster_intercept"
        des = design.with_random_effects(re)
        fit = fit_glmm(des, fam, re)
    if not fit.converged or not np.all(np.isfinite(fit.beta)):
        raise FitError(f"{model} model failed to converge")
    N = design.n_clusters
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        corr = _resolve_correction(args.correction, model, fam, N, fit, des)
    for w in caught:
        _warn(str(w.message))
    boot = None
    if corr == "bootstrap":
        boot = parametric_bootstrap_ci(fit, des, fam, B=args.boot_reps, seed=args.seed)
    try:
        hte = wald_interaction_test(fit, des, corr, args.alpha, bootstrap=boot)
    except CorrectionError as exc:
        _warn(f"{corr} failed ({exc}); using the normal reference")
        corr, boot = "normal", None
        hte = wald_interaction_test(fit, des, corr, args.alpha)
    if hte.warning:
        _warn(hte.warning)
    coefs = []
    for k, name in enumerate(design.column_names):
        c = np.zeros(design.q)
        c[k] = 1.0
        r = contrast_test(fit, des, c, corr, args.alpha, boot)
        coefs.append({"term": name, "estimate": _num(r.estimate), "se": _num(r.se),
                      "df": _num(r.df), "p": _num(r.p_value),
                      "ci_low": _num(r.ci_low), "ci_high": _num(r.ci_high)})
    sub = subgroup_effects(fit, des, corr, args.alpha, boot)
    singular = bool(getattr(fit, "singular", False))
    if model == "flexible" and singular:
        _warn("flexible GLMM fit is singular; the two-step procedure would report the standard GLMM")
    block = {
        "model": {"flexible": "flexible-glmm", "standard": "glmm", "gee": "gee"}[model],
        "family": fam.kind,
        "n": design.n,
        "n_clusters": N,
        "correction": corr,
        "alternative_correction": (alternative_correction(model, fam, N)
                                   if model != "gee" and N <= 12 else None),
        "coefficients": coefs,
        "hte_test": {"estimate": _num(hte.estimate), "se": _num(hte.se),
                     "statistic": _num(hte.statistic), "df": _num(hte.df),
                     "p": _num(hte.p_value), "ci_low": _num(hte.ci_low),
                     "ci_high": _num(hte.ci_high), "reject": hte.reject, "warning": hte.warning},
        "subgroup_effects": [{"level": e.level, "estimate": _num(e.estimate), "se": _num(e.se),
                              "df": _num(e.df), "ci_low": _num(e.ci_low),
                              "ci_high": _num(e.ci_high)} for e in sub.effects],
        "singular": singular,
        "fallback_used": corr != args.correction.replace("-", "_") and args.correction not in ("auto", "none"),
    }
    if model == "gee":
        block["fay_graubard_applicable"] = bool(fit.fg_applicable)
    else:
        block["covariance"] = np.asarray(fit.covariance).tolist()
    if boot is not None:
        block["bootstrap"] = {"reps": args.boot_reps, "seed": args.seed,
                              "n_singular": boot.n_singular_boot, "n_failed": boot.n_failed}
    return block


def _print_block(block, out):
    print(f"== {block['model']} ({block['family']}, {block['n_clusters']} clusters, "
          f"n={block['n']}) correction={block['correction']}", file=out)
    rows = [(c["term"], c["estimate"], c["se"], c["df"], c["p"]) for c in block["coefficients"]]
    print(_table(("term", "estimate", "se", "df", "p"), rows), file=out)
    h = block["hte_test"]
    print(f"HTE test: estimate={_fmt(h['estimate'])} se={_fmt(h['se'])} df={_fmt(h['df'])} "
          f"p={_fmt(h['p'])} CI=({_fmt(h['ci_low'])}, {_fmt(h['ci_high'])}) "
          f"reject={_fmt(h['reject'])}", file=out)
    for e in block["subgroup_effects"]:
        print(f"  subgroup {e['level']}: effect={_fmt(e['estimate'])} se={_fmt(e['se'])} "
              f"CI=({_fmt(e['ci_low'])}, {_fmt(e['ci_high'])})", file=out)
    flags = [f"singular={_fmt(block['singular'])}", f"fallback={_fmt(block['fallback_used'])}"]
    if "fay_graubard_applicable" in block:
        flags.append(f"fay_graubard_applicable={_fmt(block['fay_graubard_applicable'])}")
    print("flags: " + " ".join(flags), file=out)


def cmd_fit(args) -> int:
    try:
        schema = {"cluster": args.cluster, "treatment": args.treatment, "subgroup": args.subgroup,
                  "outcome": args.outcome,
                  "covariates": tuple(c for c in (args.covariates or "").split(",") if c)}
        data = load_dataset(args.data, schema)
        fam = get_family(args.family)
        design = build_design(data, ModelSpec(fam, "subgroup_within_cluster", schema["covariates"]))
    except (DataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    models = list(FIT_MODELS.values()) if args.model == "all" else [FIT_MODELS[args.model]]
    blocks = []
    try:
        for m in models:
            blocks.append(_fit_block(m, design, fam, args))
    except (FitError, np.linalg.LinAlgError) as exc:
        print(f"error: fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    result = {"schema_version": SCHEMA_VERSION, "results": blocks}
    if args.format == "json":
        sys.stdout.write(json.dumps(result, indent=2) + "\n")
    elif args.format == "csv":
        sys.stdout.write(_fit_csv(blocks))
    else:
        for b in blocks:
            _print_block(b, sys.stdout)
            print()
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2) + "\n")
    return EXIT_OK


def _fit_csv(blocks) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "term", "estimate", "se", "df", "p", "ci_low", "ci_high"])
    for b in blocks:
        for c in b["coefficients"]:
            w.writerow([b["model"], c["term"], c["estimate"], c["se"], c["df"], c["p"],
                        c["ci_low"], c["ci_high"]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# simulate / report
# ---------------------------------------------------------------------------

METRICS = ("bias", "esd", "type1_rate", "n_singular", "n_singular_flexible",
           "n_singular_standard", "n_fallback", "n_failed_fits", "n_success", "correction_used")


def summary_json(summary) -> str:
    return json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n"


def summary_csv(summary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "metric", "value"])
    for row in summary.to_dict()["rows"]:
        for m in METRICS:
            v = row[m]
            w.writerow([row["model"], m, "" if v is None else (repr(v) if isinstance(v, float) else v)])
    return buf.getvalue()


def summary_table(summary) -> str:
    d = summary.to_dict()
    head = (f"scenario {d['scenario']}  family={d['family']}  N={d['n_clusters']}  "
            f"reps={d['n_reps']}")
    rows = [(r["model"], r["bias"], r["esd"], r["type1_rate"], r["n_singular"], r["n_fallback"],
             r["n_failed_fits"], r["correction_used"]) for r in d["rows"]]
    note = "" if d["family"] != "bernoulli" else "\n(bias/esd on the logit scale are not comparable across models)"
    return head + "\n" + _table(("model", "bias", "esd", "type1", "singular", "fallback",
                                 "failed", "correction"), rows) + note + "\n"


def _render(summary, fmt) -> str:
    return {"json": summary_json, "csv": summary_csv, "table": summary_table}[fmt](summary)


def cmd_simulate(args) -> int:
    if args.reps < 1:
        print("error: --reps must be positive", file=sys.stderr)
        return EXIT_DATA
    if args.workers < 1:
        print("error: --workers must be positive", file=sys.stderr)
        return EXIT_DATA
    try:
        cfg = builtin_scenario(args.scenario, args.family, args.clusters, args.varying_sizes,
                               n_reps=args.reps, base_seed=args.seed)
    except (ScenarioError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    records = run_replicates(cfg, args.workers)
    summary = summarize_records(records)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "records.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (out / "summary.json").write_text(summary_json(summary))
    (out / "summary.csv").write_text(summary_csv(summary))
    sys.stdout.write(_render(summary, args.format))
    failed = [r for r in summary.rows if r.n_failed_fits > 0.10 * cfg.n_reps]
    if failed:
        msg = ", ".join(f"{r.model}: {r.n_failed_fits}" for r in failed)
        print(f"error: more than 10% of fits failed ({msg})", file=sys.stderr)
        return EXIT_FIT
    return EXIT_OK


def read_records(paths) -> list:
    records = []
    for path in paths:
        p = Path(path)
        if p.is_dir():
            p = p / "records.jsonl"
        with open(p) as fh:
            for k, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{p}: line {k}: malformed record ({exc.msg})") from None
                if not isinstance(rec, dict) or "model" not in rec or "rep_index" not in rec:
                    raise DataError(f"{p}: line {k}: record lacks model/rep_index")
                if rec["model"] not in MODELS:
                    raise DataError(f"{p}: line {k}: unknown model {rec['model']!r}")
                records.append(rec)
    if not records:
        raise DataError("no records found")
    return records


def cmd_report(args) -> int:
    try:
        records = read_records(args.inputs)
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    summary = summarize_records(records)
    text = _render(summary, args.format)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="htecrt",
                                description="Subgroup treatment-effect heterogeneity in cluster-randomized trials")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit models to a CSV file")
    f.add_argument("--data", required=True)
    f.add_argument("--family", required=True, choices=("gaussian", "poisson", "binomial"))
    f.add_argument("--model", default="all", choices=tuple(FIT_MODELS) + ("all",))
    f.add_argument("--cluster", default="cluster")
    f.add_argument("--treatment", default="trt")
    f.add_argument("--subgroup", default="subgroup")
    f.add_argument("--outcome", default="y")
    f.add_argument("--covariates", default="")
    f.add_argument("--correction", default="auto", choices=CORRECTIONS)
    f.add_argument("--boot-reps", type=int, default=100)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--alpha", type=float, default=0.05)
    f.add_argument("--format", default="table", choices=("table", "csv", "json"))
    f.add_argument("--out")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run a built-in simulation scenario")
    s.add_argument("--scenario", type=int, required=True, choices=(1, 2, 3, 4))
    s.add_argument("--family", required=True, choices=("gaussian", "poisson", "binomial"))
    s.add_argument("--clusters", type=int, required=True, choices=(50, 100, 12))
    s.add_argument("--varying-sizes", action="store_true")
    s.add_argument("--reps", type=int, default=1000)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--format", default="table", choices=("table", "csv", "json"))
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", help="aggregate replicate records")
    r.add_argument("--in", dest="inputs", nargs="+", required=True,
                   help="record files (or simulate output directories)")
    r.add_argument("--format", default="table", choices=("table", "csv", "json"))
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_DATA
    try:
        return args.func(args)
    except (FitError, SimulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FIT


if __name__ == "__main__":
    sys.exit(main())
