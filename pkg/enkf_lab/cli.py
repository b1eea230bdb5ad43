#!/usr/bin/env python3
"""
Command line front end

    enkf-lab update PROBLEM [--method M] [--seed S] [--output FILE]
    enkf-lab experiment PRESET [--master-seed S] [--seeds N] [--out-dir DIR] [--threads T]
    enkf-lab report [RECORDS_CSV] [--out-dir DIR]

Exit codes: 0 success, 2 configuration or input errors, 3 numeric failures.
"""

import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

import numpy as np

from enkf_lab import __version__
from enkf_lab.config_loader import get_threads, load_config
from enkf_lab.console import (
    print_check,
    print_error,
    print_header,
    print_info,
    print_step,
    print_success,
    print_warning,
)
from enkf_lab.eki import EkiProblem, eki_update, leki_update
from enkf_lab.estimators import LocalizationConfig
from enkf_lab.exceptions import ConfigError, EnkfLabError, ExperimentError, InvalidInputError, NumericError
from enkf_lab.experiments import mix_seed, run_experiment_counted, summarize
from enkf_lab.export import (
    build_report,
    dumps_json,
    read_records_csv,
    write_json,
    write_records_csv,
    write_report,
)
from enkf_lab.models import (
    CovarianceSpec,
    Ensemble,
    GaussianPrior,
    linear_map,
    make_covariance,
    sample_ensemble,
    tanh_fixture,
)
from enkf_lab.operators import LinearProblem
from enkf_lab.path_manager import get_latest_file, make_run_dir
from enkf_lab.updates import (
    eakf_update,
    etkf_update,
    localized_po_update,
    localized_sr_update,
    po_update,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

DEFAULT_OUT_DIR = "results"


def _build_ensemble(request: Dict[str, Any], seed: int) -> Ensemble:
    if "ensemble" in request:
        try:
            return Ensemble(np.asarray(request["ensemble"], dtype=float))
        except (TypeError, ValueError, InvalidInputError) as e:
            raise ConfigError(str(e), field="update -> ensemble") from e
    prior_cfg = request["prior"]
    if "N" not in request:
        raise ConfigError("Sampling from a prior needs N", field="update -> N")
    try:
        if "covariance" in prior_cfg:
            cov = make_covariance(CovarianceSpec.from_dict(dict(prior_cfg["covariance"])))
        else:
            cov = np.asarray(prior_cfg["cov"], dtype=float)
        mean = np.asarray(prior_cfg.get("mean", np.zeros(cov.shape[0])), dtype=float)
        prior = GaussianPrior(mean, cov)
    except (KeyError, TypeError, ValueError, InvalidInputError) as e:
        raise ConfigError(f"Invalid prior: {e}", field="update -> prior") from e
    return sample_ensemble(prior, int(request["N"]), seed)


def _localization(request: Dict[str, Any]) -> LocalizationConfig:
    loc = request.get("localization")
    if not loc:
        raise ConfigError("Localized methods need a localization section", field="update -> localization")
    try:
        return LocalizationConfig(
            radius=loc.get("radius"),
            t=loc.get("t"),
            c=loc.get("c"),
        )
    except InvalidInputError as e:
        raise ConfigError(str(e), field="update -> localization") from e


def run_update(request: Dict[str, Any], method: str, seed: int) -> Dict[str, Any]:
    """Build the problem described by an update request and apply one update"""
    E = _build_ensemble(request, seed)
    noise_seed = mix_seed(seed, "perturbations", 0)
    problem_cfg = request["problem"]
    try:
        gamma = np.asarray(problem_cfg["gamma"], dtype=float)
        y = np.asarray(problem_cfg["y"], dtype=float)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), field="update -> problem") from e

    if method in ("eki", "leki"):
        forward_cfg = request.get("forward", {"kind": "linear"})
        if forward_cfg.get("kind", "linear") == "tanh":
            forward = tanh_fixture(E.dim, int(np.atleast_1d(y).size), float(forward_cfg.get("coupling", 0.1)))
        else:
            forward = linear_map(problem_cfg["A"])
        prob = EkiProblem(forward, gamma, y, alpha=float(request.get("alpha", 1.0)))
        if method == "eki":
            result = eki_update(E, prob, seed=noise_seed)
        else:
            for key in ("rho_up", "rho_pp"):
                if key not in request:
                    raise ConfigError("LEKI needs both localization radii", field=f"update -> {key}")
            result = leki_update(E, prob, float(request["rho_up"]), float(request["rho_pp"]), seed=noise_seed)
    else:
        problem = LinearProblem(problem_cfg["A"], gamma, y)
        if method == "po":
            result = po_update(E, problem, seed=noise_seed)
        elif method == "etkf":
            result = etkf_update(E, problem)
        elif method == "eakf":
            result = eakf_update(E, problem)
        elif method == "loc-po":
            result = localized_po_update(E, problem, _localization(request), seed=noise_seed)
        else:
            result = localized_sr_update(E, problem, _localization(request))

    out = result.to_dict()
    out["seed"] = seed
    out["N"] = E.size
    return out


def cmd_update(args) -> int:
    config = load_config(args.problem)
    if config.kind != "update":
        raise ConfigError(f"{args.problem} is not an update request", field="update")
    request = config.update
    method = args.method or request["method"]
    seed = args.seed if args.seed is not None else int(request.get("seed", 0))
    try:
        output = run_update(request, method, seed)
    except (KeyError, TypeError) as e:
        raise ConfigError(f"Invalid update request: {e}", field="update") from e

    if args.output:
        write_json(output, args.output)
        print_success(f"Wrote {method} result to {args.output}")
    else:
        sys.stdout.write(dumps_json(output))
    return EXIT_OK


def cmd_experiment(args) -> int:
    config = load_config(args.config)
    if config.kind != "experiment":
        raise ConfigError(f"{args.config} is not an experiment preset", field="experiment")
    spec = config.experiment_spec(master_seed=args.master_seed, seeds=args.seeds)
    threads = args.threads if args.threads is not None else get_threads()

    print_header(f"EXPERIMENT {spec.id}")
    print_info(f"kind={spec.kind} N grid={spec.n_grid} seeds={spec.seeds} "
               f"master seed={spec.master_seed} threads={threads}")
    print_step("Running", f"{len(spec.covariances) or 1} prior(s) x {len(spec.n_grid)} N x {spec.seeds} trials")
    records, failed = run_experiment_counted(spec, threads=threads)

    out_dir = args.out_dir or spec.output or DEFAULT_OUT_DIR
    run_dir = make_run_dir(out_dir, spec.id)
    csv_path = write_records_csv(records, os.path.join(run_dir, "records.csv"))
    summary = summarize(records, spec, failed=failed)
    summary["spec"] = spec.to_dict()
    json_path = write_json(summary, os.path.join(run_dir, "summary.json"))
    print_success(f"Wrote {len(records)} records to {csv_path}")
    print_success(f"Wrote summary to {json_path}")

    for check in summary["checks"]:
        print_check(check["passed"], check["name"], check["detail"])
    if summary["checks"] and not summary["passed"]:
        print_warning("Some checks failed")
    return EXIT_OK


def cmd_report(args) -> int:
    csv_path = args.records or get_latest_file("records.csv", out_dir=args.out_dir)
    if csv_path is None:
        raise InvalidInputError(f"no records: no CSV given and no run found under {args.out_dir}")
    records = read_records_csv(csv_path)
    tables = build_report(records, target=args.target, tol=args.tol)

    checks: Optional[List[Dict]] = None
    summary_path = os.path.join(os.path.dirname(csv_path), "summary.json")
    if os.path.exists(summary_path):
        with open(summary_path, "r", encoding="utf-8") as f:
            checks = json.load(f).get("checks")

    report_dir = args.report_dir or os.path.dirname(csv_path) or "."
    written = write_report(tables, report_dir, checks=checks)

    print_header("REPORT")
    fits = tables["rate_fits"]
    for row in fits.itertuples(index=False):
        slope = "n/a" if row.slope != row.slope else f"{row.slope:.3f}"
        print(f"  {row.experiment:<20} {row.method:<14} {row.field:<11} slope {slope:>7}  {row.status}")
    for check in checks or []:
        print_check(check["passed"], check["name"], check.get("detail", ""))
    for path in written:
        print_success(f"Wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="enkf-lab",
        description="Ensemble Kalman updates, exact oracles and Monte Carlo rate experiments",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_update = sub.add_parser("update", help="apply one ensemble update to a problem file")
    p_update.add_argument("problem", help="YAML/JSON file with an 'update' section")
    p_update.add_argument("--method", choices=["po", "etkf", "eakf", "loc-po", "loc-sr", "eki", "leki"])
    p_update.add_argument("--seed", type=int, help="overrides update.seed")
    p_update.add_argument("--output", help="write the JSON result here instead of stdout")
    p_update.set_defaults(func=cmd_update)

    p_exp = sub.add_parser("experiment", help="run an experiment preset")
    p_exp.add_argument("config", help="YAML/JSON preset with an 'experiment' section")
    p_exp.add_argument("--master-seed", type=int, help="overrides experiment.master_seed")
    p_exp.add_argument("--seeds", type=int, help="overrides experiment.seeds")
    p_exp.add_argument("--out-dir", help="results root; overrides the preset's output (default: results)")
    p_exp.add_argument("--threads", type=int, help="overrides ENKF_LAB_THREADS")
    p_exp.set_defaults(func=cmd_experiment)

    p_rep = sub.add_parser("report", help="summarize a records CSV")
    p_rep.add_argument("records", nargs="?", help="records CSV (default: latest run)")
    p_rep.add_argument("--out-dir", default=DEFAULT_OUT_DIR, help="results root used to find the latest run")
    p_rep.add_argument("--report-dir", help="where to write report files (default: next to the CSV)")
    p_rep.add_argument("--target", type=float, default=-0.5, help="expected slope (default -0.5)")
    p_rep.add_argument("--tol", type=float, default=0.15, help="slope tolerance (default 0.15)")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    try:
        return args.func(args)
    except (ConfigError, InvalidInputError) as e:
        print_error(str(e))
        return EXIT_INPUT
    except (NumericError, ExperimentError) as e:
        print_error(str(e))
        return EXIT_NUMERIC
    except EnkfLabError as e:
        print_error(str(e))
        return EXIT_NUMERIC
