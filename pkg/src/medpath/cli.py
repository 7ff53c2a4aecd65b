"""Command-line entry point: simulate / fit / select / check-id.

Exit codes: 0 success, 1 numerical or statistical failure, 2 usage or
validation failure.  All randomness flows from the --seed flag; flags
override config-file entries, which override defaults, and the effective
configuration is echoed into the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as mio
from .core_types import ConvergenceError, Dataset, ValidationError, validate_dataset
from .inference import (
    CORRECTION_METHODS,
    adjust_pvalues,
    select_active_pathways,
    test_nde,
)
from .factor_model import check_condition_i
from .mediator_model import BasisSpec, default_basis
from .pipeline import PipelineConfig, run_pipeline
from .simulation import METHODS, SimConfig, run_replications

log = logging.getLogger("medpath")

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medpath",
        description="Mediation pathway selection with a latent-factor proxy "
        "for unmeasured mediator-outcome confounding.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the replication study and write metrics.csv")
    sim.add_argument("--scenario", type=int, default=1, choices=(1, 2))
    sim.add_argument("--n", type=int, default=300)
    sim.add_argument("--p", type=int, default=100)
    sim.add_argument("--phi", type=float, default=1.0)
    sim.add_argument("--phi1", type=float, default=0.0)
    sim.add_argument("--reps", type=int, default=200)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--methods", default=",".join(METHODS),
                     help="comma list from " + ",".join(METHODS))
    sim.add_argument("--folds", type=int, default=5)
    sim.add_argument("--n-lambda", type=int, default=100)
    sim.add_argument("--threads", type=int, default=1, help="worker processes for replications")
    sim.add_argument("--out", default=".", help="output directory")

    for name in ("fit", "select", "check-id"):
        cmd = sub.add_parser(name)
        cmd.add_argument("--data", required=True, help="dataset CSV (header row required)")
        cmd.add_argument("--config", required=True,
                         help="sidecar JSON: column roles, optional basis/defaults")
        cmd.add_argument("--t", default=None, help="factor count, or 'auto'")
        cmd.add_argument("--t-max", type=int, default=None)
        cmd.add_argument("--contrast", nargs=2, type=float, default=None,
                         metavar=("Z", "Z_PRIME"))
        cmd.add_argument("--correction", default=None,
                         help="comma list; first entry drives the active-pathway call")
        cmd.add_argument("--alpha", type=float, default=None)
        cmd.add_argument("--folds", type=int, default=None)
        cmd.add_argument("--n-lambda", type=int, default=None)
        cmd.add_argument("--lambda-min-ratio", type=float, default=None)
        cmd.add_argument("--delta", type=float, default=None)
        cmd.add_argument("--seed", type=int, default=None)
        cmd.add_argument("--out", default=".", help="output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        return _cmd_analysis(args)
    except (ValidationError, FileNotFoundError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (ConvergenceError, RuntimeError, np.linalg.LinAlgError) as exc:
        log.error("%s", exc)
        return EXIT_NUMERICAL


def _cmd_simulate(args) -> int:
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    cfg = SimConfig(
        n=args.n, p=args.p, scenario=args.scenario, phi=args.phi, phi1=args.phi1,
        n_reps=args.reps, seed=args.seed, methods=methods, folds=args.folds,
        n_lambda=args.n_lambda,
    )
    problems = cfg.validate()
    if problems:
        raise ValidationError("; ".join(problems))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, vars(args))
    rows = run_replications(cfg, workers=max(1, args.threads))
    mio.write_metrics_csv(out / "metrics.csv", rows)
    for r in rows:
        log.info("%s: MSE=%.4f TP=%.2f FP=%.2f (%d reps, %d failures)",
                 r.method, r.mse, r.tp, r.fp, r.n_reps, r.failures)
    return EXIT_OK


def _effective_config(args) -> dict:
    cfg = mio.load_role_config(args.config)
    defaults = {
        "t": 1, "t_max": 5, "contrast": [1.0, 0.0], "correction": "bonferroni",
        "alpha": 0.05, "folds": 5, "n_lambda": 100, "lambda_min_ratio": 1e-4,
        "delta": 1.0, "seed": 0,
    }
    eff = dict(defaults)
    eff.update({k: v for k, v in cfg.items() if k != "roles" and k != "basis"})
    for key in defaults:
        flag = getattr(args, key.replace("-", "_"), None)
        if flag is not None:
            eff[key] = flag
    eff["roles"] = cfg["roles"]
    eff["basis"] = cfg.get("basis")
    if isinstance(eff["t"], str) and eff["t"] != "auto":
        eff["t"] = int(eff["t"])
    return eff


def _load_problem(args):
    eff = _effective_config(args)
    d = mio.read_dataset_csv(args.data, eff["roles"])
    violations = validate_dataset(d)
    if violations:
        raise ValidationError("dataset invalid: " + "; ".join(violations))
    from .core_types import column_scales

    scales = column_scales(d.m)[1]
    for j in np.flatnonzero(scales <= 0):
        raise ValidationError(
            f"constant mediator column {d.mediator_name(int(j))} (index {int(j)})"
        )
    if eff["basis"] is not None:
        basis = BasisSpec.from_config(eff["basis"])
    else:
        basis = default_basis(d.q)
        log.warning(
            "no basis in config; defaulting to constant+treatment+linear covariates "
            "(identification usually needs nonlinear or interaction terms)"
        )
    eff["basis"] = basis.to_config()
    return d, basis, eff


def _pipeline_config(basis, eff, compute_sandwich: bool, require_ii: bool = True) -> PipelineConfig:
    return PipelineConfig(
        basis=basis, t=eff["t"], t_max=int(eff["t_max"]),
        z=float(eff["contrast"][0]), z_prime=float(eff["contrast"][1]),
        delta=float(eff["delta"]), folds=int(eff["folds"]),
        n_lambda=int(eff["n_lambda"]), lambda_min_ratio=float(eff["lambda_min_ratio"]),
        seed=int(eff["seed"]), compute_sandwich=compute_sandwich,
        require_condition_ii=require_ii,
    )


def _cmd_analysis(args) -> int:
    d, basis, eff = _load_problem(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, eff)

    if args.command == "check-id":
        return _cmd_check_id(d, basis, eff, out)

    try:
        result = run_pipeline(d, _pipeline_config(basis, eff, compute_sandwich=True))
    except ValidationError as exc:
        if "condition (ii)" in str(exc):
            log.error("%s", exc)
            return EXIT_NUMERICAL
        raise
    z, z_prime = float(eff["contrast"][0]), float(eff["contrast"][1])
    nde = test_nde(result.outcome_fit, result.sandwich, z, z_prime)

    corrections = [c.strip() for c in str(eff["correction"]).split(",") if c.strip()]
    for c in corrections:
        if c not in CORRECTION_METHODS:
            raise ValidationError(f"unknown correction {c!r}; choose from {CORRECTION_METHODS}")
    report = select_active_pathways(
        result.outcome_fit, result.mediator_fit, corrections[0], float(eff["alpha"]),
        z, z_prime, d.x, sandwich=result.sandwich, mediator_names=d.mediator_names,
    )
    report = _with_nde(report, nde)

    fit_json = {
        "nde": nde,
        "lambda_initial": result.initial_fit.lambda_used,
        "lambda_adaptive": result.outcome_fit.lambda_used,
        "delta": result.outcome_fit.delta_used,
        "active_set": [int(j) + 1 for j in result.outcome_fit.active_set],
        "factor": result.factor_fit.to_report(),
        "condition_i": _condition_i_report(result.factor_fit.loading),
        "condition_ii": result.proxy_result.condition_ii,
        "coefficients": {
            "beta0": result.outcome_fit.params.beta0,
            "beta1": result.outcome_fit.params.beta1,
            "beta2": result.outcome_fit.params.beta2.tolist(),
            "beta3": result.outcome_fit.params.beta3.tolist(),
            "phi": result.outcome_fit.params.phi.tolist(),
        },
        "mediator_names": [d.mediator_name(j) for j in range(d.p)],
        "solver_backend": _backend(),
        "diagnostics": result.diagnostics,
        "initial_cv_table": result.initial_fit.cv_table.tolist()
        if result.initial_fit.cv_table is not None else None,
        "adaptive_tuning": result.outcome_fit.tuning,
        "adaptive_tuning_table": result.outcome_fit.cv_table.tolist()
        if result.outcome_fit.cv_table is not None else None,
    }
    if result.t_selection is not None:
        fit_json["t_selection"] = {
            "t": result.t_selection.t,
            "ratios": np.asarray(result.t_selection.ratios).tolist(),
            "low_confidence": result.t_selection.low_confidence,
        }
        log.info("eigenvalue-ratio table: %s", np.round(result.t_selection.ratios, 3).tolist())
    with open(out / "fit.json", "w", encoding="utf-8") as fh:
        json.dump(fit_json, fh, indent=2)

    if args.command == "select":
        extra = {}
        raw = np.array([row.raw_p for row in report.pathways])
        for c in corrections[1:]:
            extra[c] = adjust_pvalues(raw, c) if raw.size else raw
        mio.write_selection_csv(out / "selection.csv", report, extra_adjusted=extra)
        with open(out / "selection.json", "w", encoding="utf-8") as fh:
            json.dump(mio.selection_report_json(report), fh, indent=2)
        log.info("selected %d mediators; %d active pathways",
                 len(report.pathways), len(report.active_pathways))
    return EXIT_OK


def _with_nde(report, nde):
    from dataclasses import replace

    return replace(report, nde=nde)


def _condition_i_report(loading: np.ndarray) -> dict:
    res = check_condition_i(loading)
    return {
        "holds": res.holds,
        "inconclusive": res.inconclusive,
        "counterexample_row": res.counterexample,
        "witness_deletions_checked": len(res.certificate),
    }


def _cmd_check_id(d: Dataset, basis: BasisSpec, eff: dict, out: Path) -> int:
    from .factor_model import fit_factor, select_num_factors
    from .mediator_model import fit_mediator_model
    from .proxy import build_proxy

    mfit = fit_mediator_model(d, basis)
    if eff["t"] == "auto":
        sel = select_num_factors(mfit.residuals, t_max=min(int(eff["t_max"]), (d.p - 1) // 2))
        t = sel.t
        log.info("eigenvalue-ratio table: %s", np.round(sel.ratios, 3).tolist())
    else:
        t = int(eff["t"])
    ffit = fit_factor(mfit.residuals, t)
    prox = build_proxy(d, mfit.residuals, ffit.loading, ffit.uniqueness)
    ci = check_condition_i(ffit.loading)
    cii = prox.condition_ii

    lines = [
        f"factor count t = {t}",
        f"factor fit converged: {ffit.converged} (iterations {ffit.iterations})",
        "",
        f"condition (i): {'holds' if ci.holds else 'FAILS' if not ci.inconclusive else 'inconclusive'}",
    ]
    if ci.holds and ci.certificate:
        drop, first, second = ci.certificate[0]
        lines.append(
            f"  witness (after deleting row {drop + 1}): blocks {tuple(i + 1 for i in first)} "
            f"and {tuple(i + 1 for i in second)} both have full column rank"
        )
    if not ci.holds and ci.counterexample is not None:
        lines.append(f"  counterexample: deleting row {ci.counterexample + 1} breaks the split")
    lines += [
        "",
        f"condition (ii): {'holds' if cii['holds'] else 'FAILS (near-singular)'}",
        f"  rank {cii['rank']} of {cii['dim']}, condition number {cii['condition_number']:.6g}",
    ]
    text = "\n".join(lines) + "\n"
    (out / "identification.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def _echo_config(out: Path, eff: dict) -> None:
    clean = {k: v for k, v in eff.items() if not k.startswith("_")}
    with open(out / "config_used.json", "w", encoding="utf-8") as fh:
        json.dump(clean, fh, indent=2, default=str)


def _backend() -> str:
    from .penalized import solver_backend

    return solver_backend()


if __name__ == "__main__":
    sys.exit(main())
