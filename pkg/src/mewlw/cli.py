"""Command-line entry points: ``mewlw fit``, ``mewlw simulate``, ``mewlw check``.

Exit codes: 0 success, 1 input or configuration error, 2 numerical
failure.  Results are written as pretty, key-sorted JSON so outputs are
diff-stable; simulation summaries additionally get a CSV table.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .cox import common_effect
from .data import check_dataset, load_study
from .exceptions import ConvergenceError, DataError, MewlwError
from .inference import fit_evs, fit_ivs_full, fit_ivs_pooled, wald_equal_effects
from .me_model import MeModelSpec, me_joint_cov
from .sim import RNG_SCHEME, SimConfig, run_simulation

DESIGN_CHOICES = ("evs", "ivs-full", "ivs-pooled")


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on usage errors; the CLI contract wants 1
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser():
    parser = _Parser(prog="mewlw", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fit = sub.add_parser("fit", help="fit the corrected model on study files")
    fit.add_argument("--main", required=True, help="main-study CSV")
    fit.add_argument("--valid", required=True, help="validation-study CSV")
    fit.add_argument("--design", choices=DESIGN_CHOICES, default="evs")
    fit.add_argument("--ties", choices=("breslow", "efron"), default="efron")
    fit.add_argument("--events", type=int, default=None,
                     help="expected number of event types (checked against the files)")
    fit.add_argument("--me-predictors", default="self_report,z,t",
                     help="comma list of error-model predictors")
    fit.add_argument("--out", required=True, help="output JSON path")
    fit.add_argument("--seed", type=int, default=None)
    fit.add_argument("--threads", type=int, default=os.cpu_count())
    fit.set_defaults(func=cmd_fit)

    simp = sub.add_parser("simulate", help="run the Monte Carlo study")
    simp.add_argument("--config", required=True, help="key = value config file")
    simp.add_argument("--reps", type=int, default=None, help="override replicate count")
    simp.add_argument("--seed", type=int, default=None, help="override master seed")
    simp.add_argument("--out-prefix", required=True, help="prefix for .csv/.json outputs")
    simp.add_argument("--threads", type=int, default=os.cpu_count())
    simp.set_defaults(func=cmd_simulate)

    chk = sub.add_parser("check", help="validate a study file")
    chk.add_argument("--file", required=True)
    chk.add_argument("--role", choices=("main", "validation"), default="main")
    chk.set_defaults(func=cmd_check)
    return parser


def _hash_config(obj):
    text = json.dumps(obj, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _provenance(seed, config_obj, rng_scheme):
    return {
        "version": __version__,
        "seed": seed,
        "config_hash": _hash_config(config_obj),
        "rng_scheme": rng_scheme,
    }


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    return x


def _fit_block(fit):
    ci = fit.ci95()
    hr, hr_ci = fit.hazard_ratios()
    return {
        "beta": fit.beta.tolist(),
        "cov": fit.cov.tolist(),
        "se": fit.se.tolist(),
        "ci95": ci.tolist(),
        "hr": hr.tolist(),
        "hr_ci95": hr_ci.tolist(),
    }


def cmd_fit(args):
    spec = MeModelSpec(predictors=tuple(
        s.strip() for s in args.me_predictors.split(",") if s.strip()))
    main = load_study(args.main, role="main")
    valid = load_study(args.valid, role="validation")
    for name, ds in (("main", main), ("validation", valid)):
        if args.events is not None and ds.n_events != args.events:
            raise DataError(
                f"{name} file carries {ds.n_events} event types, expected {args.events}")
    if main.n_events != valid.n_events:
        raise DataError("main and validation files disagree on the number of event types")

    if args.design == "evs":
        result = fit_evs(main, valid, specs=spec, ties=args.ties)
    elif args.design == "ivs-full":
        result = fit_ivs_full(main, valid, specs=spec, ties=args.ties)
    else:
        result = fit_ivs_pooled(main, valid, specs=spec, ties=args.ties)

    me_fit = result.me_fit
    out = {
        "provenance": _provenance(args.seed, vars(args), "deterministic fit"),
        "design": args.design,
        "ties": args.ties,
        "rho": result.rho,
        "me_model": {
            "cov": _jsonable(np.asarray(me_joint_cov(me_fit))),
            "events": {
                str(k): {
                    "gamma": me_fit.events[k].gamma.tolist(),
                    "columns": list(me_fit.events[k].column_names),
                    "n_rows": me_fit.events[k].n_rows,
                    "n_cases": me_fit.events[k].n_cases,
                    "converged": me_fit.events[k].info.converged,
                }
                for k in me_fit.event_types
            },
        },
    }
    out.update(_fit_block(result.fit))
    if args.design == "ivs-pooled":
        out["weighted_wlw"] = _diag_block(result.fit_main)
        out["components"] = {
            "weighted": {"beta": result.fit_main.beta.tolist(),
                         "se": np.sqrt(np.diag(result.cov_main)).tolist()},
            "validation": {"beta": result.fit_validation.beta.tolist(),
                           "se": np.sqrt(np.diag(result.cov_validation)).tolist()},
        }
        out["wlw_standard"] = _standard_block(result.fit_validation)
    else:
        out["weighted_wlw"] = _diag_block(result.fit)

    if result.fit.n_events == 2:
        b, V = result.fit.first_components()
        test = wald_equal_effects(b, V)
        out["wald_equal"] = {"z": test.statistic, "p": test.p_value}

    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


def _diag_block(fit):
    return {
        str(k + 1): {
            "converged": d.converged,
            "iterations": d.iterations,
            "score_norm": d.score_norm,
        }
        for k, d in enumerate(fit.diagnostics)
    }


def _standard_block(fit):
    block = _fit_block(fit)
    if fit.n_events >= 2:
        b, V = fit.first_components()
        ce = common_effect(b, V)
        block["common_effect"] = {
            "estimate": ce.estimate,
            "variance": ce.variance,
            "weights": ce.weights.tolist(),
            "method": ce.method,
        }
    return block


def cmd_simulate(args):
    with open(args.config, encoding="utf-8") as fh:
        text = fh.read()
    config = SimConfig.from_text(text)
    if args.reps is not None:
        config = dataclasses.replace(config, replicates=args.reps)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)

    def progress(done, total):
        print(f"replicates: {done}/{total}", file=sys.stderr)

    result = run_simulation(config, threads=max(1, args.threads or 1),
                            progress=progress)
    csv_path = args.out_prefix + ".csv"
    json_path = args.out_prefix + ".json"
    result.to_csv(csv_path)
    sidecar = {
        "provenance": _provenance(config.seed, dataclasses.asdict(config), RNG_SCHEME),
        "config": dataclasses.asdict(config),
        "n_failed": result.n_failed,
        "failed_replicates": [o.replicate for o in result.outcomes if not o.ok],
        "estimates": {
            method: {
                field: [[_jsonable(v) for v in o.methods[method][field]]
                        for o in result.outcomes if o.ok]
                for field in ("beta", "se", "cover")
            }
            for method in config.methods()
        },
    }
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {csv_path} and {json_path} "
          f"({result.n_failed} failed replicates)", file=sys.stderr)
    return 0


def cmd_check(args):
    try:
        dataset = load_study(args.file, role=args.role)
    except DataError as err:
        print(f"violation: {err}")
        return 1
    report = check_dataset(dataset)
    print(report)
    return 0 if report.ok else 1


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except DataError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (ConvergenceError, MewlwError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
