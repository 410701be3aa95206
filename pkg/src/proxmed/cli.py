"""Command-line entry point: ``proxmed <command> [flags]``.

Commands: simulate, fit, estimate, experiment, oracle, report. Flags may also
come from a JSON file passed with ``--config``; explicit flags win. Tables go
to stdout, artifacts to the paths given with ``--out``.

Exit codes: 0 success, 2 validation error, 3 solver failure, 4 check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .bridges import BRIDGES, BridgeSpec
from .data import ColumnSchema, DataError, load_csv, validate, write_csv
from .estimators import (
    METHODS,
    RCT_VARIANTS,
    EstimateResult,
    EstimationError,
    bridges_for,
    fit_bridges,
    fit_dr_bridges,
    psi_rct,
    psi_summand,
    rct_nuisance,
    rct_summand,
)
from .inference import BootstrapConfig, InferenceError, bootstrap_se, mean_sandwich_se, sandwich_se, theta_pipeline
from .oracle import (
    CompletenessError,
    DiscreteLaw,
    completeness_check,
    degenerate_u_law,
    independent_z_law,
    psi_from_counterfactuals,
    random_law,
    solve_bridges_discrete,
    standard_mediation_formula,
)
from .simulation import DgpConfig, ExperimentSpec, closed_form_truth, generate, oracle_truth, run_experiment
from .solvers import SolverError

log = logging.getLogger("proxmed")

EXIT_OK, EXIT_VALIDATION, EXIT_SOLVER, EXIT_CHECK = 0, 2, 3, 4
ORACLE_TOL = 1e-10
FIXTURES = {"independent-z": independent_z_law, "degenerate-u": degenerate_u_law}

# built-in values for flags left unset on the command line and in --config
DEFAULTS = {
    "n": 2000, "reps": 1000, "bootstrap_B": 0, "methods": ",".join(METHODS), "misspec": "",
    "rct": False, "propensity": "marginal", "threads": 1, "laws": 100, "oracle_mc": 200_000,
    "format": "text",
}


class UsageError(ValueError):
    pass


def _csv_list(text: str) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _propensity(text: str):
    if text in ("marginal", "logistic"):
        return text
    if text.startswith("known:"):
        p = float(text.split(":", 1)[1])
        if not 0.0 < p < 1.0:
            raise UsageError("known propensity must lie in (0, 1)")
        return 1.0 - p  # flag gives P(A=1); estimators want P(A=0)
    raise UsageError(f"--propensity expects known:p, logistic or marginal, got {text!r}")


def _bridge_spec(misspec: str, p_x: int) -> BridgeSpec:
    names = _csv_list(misspec)
    bad = [b for b in names if b not in BRIDGES]
    if bad:
        raise UsageError(f"--misspec names unknown bridge(s) {bad}; expected a subset of {BRIDGES}")
    return BridgeSpec.misspecified(p_x, names)


def _methods(text: str) -> List[str]:
    names = _csv_list(text)
    bad = [m for m in names if m not in METHODS]
    if bad or not names:
        raise UsageError(f"--methods expects a comma list from {METHODS}, got {text!r}")
    return names


def _require(args, *names):
    missing = ["--" + n.replace("_", "-") for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{args.command} needs {', '.join(missing)}")


def _load_data(args):
    schema = ColumnSchema.from_json(args.schema) if args.schema else None
    data = load_csv(args.data, schema)
    validate(data).raise_if_failed()
    return data


def _write_json(path, payload) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)


def _fmt(v, width=10, prec=4):
    return f"{'-':>{width}}" if v is None else f"{v:>{width}.{prec}f}"


def results_table(rows: Sequence[dict]) -> str:
    head = f"{'estimand':<8}  {'method':<9}{'estimate':>10}{'se':>10}{'ci_lo':>10}{'ci_hi':>10}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['estimand']:<8}  {r['method']:<9}{_fmt(r['point'])}{_fmt(r.get('se'))}"
                     f"{_fmt(r.get('ci_lo'))}{_fmt(r.get('ci_hi'))}")
    return "\n".join(lines)


def results_csv(rows: Sequence[dict], fh) -> None:
    cols = ["estimand", "method", "point", "se", "ci_lo", "ci_hi"]
    w = csv.writer(fh)
    w.writerow(cols)
    for r in rows:
        w.writerow(["" if r.get(c) is None else r[c] for c in cols])


# --- commands ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    _require(args, "seed", "out")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    cfg = ExperimentSpec.for_id(args.id).config() if args.id else DgpConfig()
    if args.rct:
        cfg = cfg.randomized()
    data, _ = generate(cfg, args.n, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(data, out)
    meta = {
        "n": args.n, "seed": args.seed, "experiment": args.id, "rct": bool(args.rct),
        "config": cfg.to_dict(),
        "oracle": closed_form_truth(cfg).to_dict(),
        "oracle_mc": oracle_truth(cfg, n_mc=args.oracle_mc, seed=args.seed).to_dict() if args.oracle_mc else None,
    }
    _write_json(out.with_suffix(".meta.json"), meta)
    o = meta["oracle"]
    print(f"wrote {data.n} rows to {out}")
    print(f"oracle psi = {o['psi']:.4f}, E[Y(0)] = {o['ey0']:.4f}, NDE(0) = {o['nde0']:.4f}, NIE(1) = {o['nie1']:.4f}")
    return EXIT_OK


def cmd_fit(args) -> int:
    _require(args, "data", "out")
    data = _load_data(args)
    spec = _bridge_spec(args.misspec, data.p_x)
    fb = fit_bridges(data, spec, bridges_for(_methods(args.methods)))
    payload = {"spec": spec.to_dict(), "params": fb.params.to_dict(), "diagnostics": fb.diagnostics()}
    _write_json(args.out, payload)
    print(f"{'bridge':<7}{'coefficient':<14}{'value':>12}")
    for attr, block in payload["params"].items():
        for name, v in block["coefficients"].items():
            print(f"{block['bridge']:<7}{name:<14}{v:>12.5f}")
    for tag, rep in fb.reports.items():
        status = "converged" if rep.converged else "NOT converged"
        print(f"{tag}: {status}, |residual| = {rep.residual_norm:.2e}, cond = {rep.condition:.3g}"
              + "".join(f"\n  warning: {w}" for w in rep.warnings))
    return EXIT_OK if all(r.converged for r in fb.reports.values()) else EXIT_SOLVER


def _estimate_rows(args, data) -> List[EstimateResult]:
    spec = _bridge_spec(args.misspec, data.p_x)
    methods = _methods(args.methods)
    fb = fit_bridges(data, spec, bridges_for(methods))
    dr0, dr1 = fit_dr_bridges(data, 0), fit_dr_bridges(data, 1)
    d0, d1 = float(dr0.summand().mean()), float(dr1.summand().mean())
    diag = fb.diagnostics()
    rows = []
    for meth in methods:
        fb.require(bridges_for([meth]))
        psi = float(psi_summand(meth, fb).mean())
        se_psi, ci_psi = sandwich_se(data, fb, meth)
        rows.append(EstimateResult("psi_10", meth, psi, diagnostics=diag).with_se(se_psi, ci_psi))
        theta = EstimateResult("nde_0", meth, psi - d0, diagnostics=diag)
        if args.bootstrap_B:
            bcfg = BootstrapConfig(B=args.bootstrap_B, seed=args.seed or 0, method=meth, threads=args.threads)
            boot = bootstrap_se(data, theta_pipeline(meth, spec), bcfg)
            theta = theta.with_se(boot.se, boot.ci)
            theta.diagnostics = {**diag, "bootstrap": boot.to_dict()}
        else:
            se, ci = sandwich_se(data, fb, meth, dr0)
            theta = theta.with_se(se, ci)
        rows.append(theta)
        rows.append(EstimateResult("nie_1", meth, d1 - psi, diagnostics=diag))
    rows.append(EstimateResult("total", "P-DR", d1 - d0).with_se(mean_sandwich_se(dr1.summand() - dr0.summand())))
    if args.rct:
        prop = _propensity(args.propensity)
        fb_all = fit_bridges(data, spec, ("h1",))
        nu = rct_nuisance(data, fb_all, prop)
        for variant in RCT_VARIANTS:
            res = psi_rct(data, fb_all, prop, variant, nuisance=nu)
            # se treats the fitted nuisances as known
            res = res.with_se(mean_sandwich_se(rct_summand(variant, data, spec, nu)))
            rows.append(res)
    return rows


def cmd_estimate(args) -> int:
    _require(args, "data")
    data = _load_data(args)
    rows = _estimate_rows(args, data)
    records = [r.to_dict() for r in rows]
    print(results_table(records))
    if args.out:
        out = Path(args.out)
        _write_json(out, {"command": "estimate", "data": str(args.data), "n": data.n, "results": records})
        with open(out.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
            results_csv(records, fh)
    return EXIT_OK


def cmd_experiment(args) -> int:
    _require(args, "id", "seed")
    spec = ExperimentSpec.for_id(args.id, n=args.n, reps=args.reps, seed=args.seed, threads=args.threads)
    if args.misspec:
        spec = replace(spec, misspecified=tuple(_csv_list(args.misspec)))
    report = run_experiment(spec)
    print(report.table())
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        report.to_json(out.with_suffix(".json"))
        report.to_csv(out.with_suffix(".csv"))
    return EXIT_CHECK if report.flagged else EXIT_OK


def _oracle_one(label: str, law: DiscreteLaw, expect_failure: bool = False) -> dict:
    rec = {"law": label, "expected_failure": expect_failure}
    try:
        res = solve_bridges_discrete(law)
    except CompletenessError as err:
        rec.update(status="expected-failure" if expect_failure else "fail", error=str(err),
                   completeness=completeness_check(law).to_dict())
        return rec
    err = max(res.max_error, abs(psi_from_counterfactuals(law) - res.psi_true))
    rec.update(res.to_dict())
    rec["status"] = "pass" if err <= ORACLE_TOL and not expect_failure else "fail"
    rec["error"] = err
    if law.sizes[0] == 1:
        rec["standard_mediation_formula"] = standard_mediation_formula(law)
    return rec


def cmd_oracle(args) -> int:
    recs = []
    if args.law:
        recs.append(_oracle_one(str(args.law), DiscreteLaw.from_json(args.law)))
    elif args.fixture:
        if args.fixture not in FIXTURES:
            raise UsageError(f"--fixture must be one of {sorted(FIXTURES)}")
        law = FIXTURES[args.fixture](args.seed or 0)
        recs.append(_oracle_one(args.fixture, law, expect_failure=args.fixture == "independent-z"))
    else:
        if args.laws < 1:
            raise UsageError("--laws must be >= 1")
        seed = args.seed or 0
        for k in range(args.laws):
            recs.append(_oracle_one(f"random[{seed}:{k}]", random_law(seed * 1_000_003 + k)))
    for rec in recs:
        line = f"{rec['law']:<22}{rec['status']:<18}"
        if "psi_true" in rec:
            line += (f"psi = {rec['psi_true']:.10f}  h = {rec['psi_h']:.10f}  hybrid = {rec['psi_hybrid']:.10f}"
                     f"  q = {rec['psi_q']:.10f}")
        else:
            line += rec["error"]
        if "standard_mediation_formula" in rec:
            line += f"  mediation formula = {rec['standard_mediation_formula']:.10f}"
        print(line)
    n_fail = sum(r["status"] == "fail" for r in recs)
    print(f"{len(recs) - n_fail} of {len(recs)} laws passed")
    if args.out:
        _write_json(args.out, {"command": "oracle", "laws": recs, "n_failed": n_fail})
    return EXIT_CHECK if n_fail else EXIT_OK


def cmd_report(args) -> int:
    """Render a saved estimate or experiment JSON as a text table or CSV."""
    _require(args, "input")
    with open(args.input, encoding="utf-8") as fh:
        payload = json.load(fh)
    if "results" in payload:
        records = payload["results"]
        if args.format == "csv":
            results_csv(records, sys.stdout)
        else:
            print(results_table(records))
    elif "rows" in payload:
        cols = ["estimator", "bias", "median_bias", "mse", "coverage", "mean_length", "median_length", "n_used"]
        exp = payload["experiment"]["id"]
        if args.format == "csv":
            w = csv.writer(sys.stdout)
            w.writerow(["experiment", *cols])
            for r in payload["rows"]:
                w.writerow([exp, *(r[c] for c in cols)])
        else:
            print(f"experiment {exp}: truth NDE(0) = {payload['truth_nde0']:.4f}, failed reps = {payload['n_failed']}")
            print(f"{'Est':<9}" + "".join(f"{c:>14}" for c in cols[1:]))
            for r in payload["rows"]:
                vals = "".join(f"{r[c]:>14.4f}" if c != "n_used" else f"{r[c]:>14d}" for c in cols[1:])
                print(f"{r['estimator']:<9}{vals}")
    else:
        raise DataError(f"{args.input}: not an estimate or experiment result file")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "estimate": cmd_estimate,
            "experiment": cmd_experiment, "oracle": cmd_oracle, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proxmed", description="Proximal mediation analysis.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file of flag values (flags override it)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        p.add_argument("--threads", type=int)

    def data_flags(p):
        p.add_argument("--data", help="input CSV")
        p.add_argument("--schema", help="JSON column-role sidecar")
        p.add_argument("--methods", help=f"comma list from {','.join(METHODS)}")
        p.add_argument("--misspec", help="comma list of bridges given sqrt_abs covariate features")

    p = sub.add_parser("simulate", help="draw a dataset from the simulation mechanism")
    common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--id", type=int, help="apply an experiment's mechanism overrides")
    p.add_argument("--rct", action="store_true", default=None, help="randomized treatment variant")
    p.add_argument("--oracle-mc", type=int, help="Monte Carlo draws for the metadata oracle (0 disables)")

    p = sub.add_parser("fit", help="fit bridge functions and save coefficients")
    common(p)
    data_flags(p)

    p = sub.add_parser("estimate", help="estimate psi and the effects")
    common(p)
    data_flags(p)
    p.add_argument("--bootstrap-B", type=int, help="bootstrap replicates for NDE(0) (0: sandwich)")
    p.add_argument("--rct", action="store_true", default=None, help="add the randomized-trial estimators")
    p.add_argument("--propensity", help="known:p, logistic or marginal")

    p = sub.add_parser("experiment", help="run a Monte Carlo experiment")
    common(p)
    p.add_argument("--id", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--misspec")

    p = sub.add_parser("oracle", help="exact identification checks on discrete laws")
    common(p)
    p.add_argument("--laws", type=int, help="number of random binary laws")
    p.add_argument("--law", help="JSON law fixture")
    p.add_argument("--fixture", help=f"built-in fixture: {', '.join(FIXTURES)}")

    p = sub.add_parser("report", help="render a saved result file")
    common(p)
    p.add_argument("--input")
    p.add_argument("--format", choices=("text", "csv"))
    return parser


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset flags from --config, then from DEFAULTS."""
    cfg = {}
    if getattr(args, "config", None):
        with open(args.config, encoding="utf-8") as fh:
            cfg = {k.replace("-", "_"): v for k, v in json.load(fh).items()}
        cmd = cfg.pop("command", None)
        if cmd not in (None, args.command):
            raise UsageError(f"config is for command {cmd!r}, not {args.command!r}")
    for key in set(vars(args)) | set(cfg) | set(DEFAULTS):
        if getattr(args, key, None) is None:
            if key in cfg:
                val = cfg[key]
                if key in ("methods", "misspec") and isinstance(val, list):
                    val = ",".join(val)
                setattr(args, key, val)
            elif key in DEFAULTS:
                setattr(args, key, DEFAULTS[key])
    return args


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args = resolve(args)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        return COMMANDS[args.command](args)
    except (SolverError, EstimationError, InferenceError, np.linalg.LinAlgError) as err:
        print(f"solver failure: {err}", file=sys.stderr)
        return EXIT_SOLVER
    except (UsageError, DataError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
