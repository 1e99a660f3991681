"""Command-line interface.

Exit codes: 0 success, 1 computation error, 2 usage or input error. Errors
are reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import DesignError, ols_refit
from .em import EmConfig, run_em
from .io import (
    InputError,
    apply_transform,
    config_echo,
    em_config_from,
    fit_document,
    ingest_csv,
    lasso_config_from,
    load_config,
    merge,
    read_table,
    sim_design_from,
    threads_from_env,
    validate_config,
    write_json,
    write_posteriors,
    write_table,
)
from .lasso import lasso_cv_select
from .model import ComputationError
from .rng import child_seeds
from .simulation import StudyAborted, design_to_dict, run_study

EXIT_OK, EXIT_COMPUTE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _report("UsageError", message, EXIT_USAGE)
        raise SystemExit(EXIT_USAGE)


def _report(kind: str, message: str, code: int) -> None:
    sys.stderr.write(json.dumps({"error": {"type": kind, "message": message, "exit_code": code}}) + "\n")


def _csv_list(text: str | None) -> list[str] | None:
    if text is None:
        return None
    return [t.strip() for t in text.split(",") if t.strip()]


def _add_data_args(p):
    p.add_argument("--data", help="input CSV with a header row")
    p.add_argument("--config", help="JSON run configuration; flags override it")
    p.add_argument("--response", help="response column name")
    p.add_argument("--locked", help="comma-separated locked-in column names")
    p.add_argument("--putative", help="comma-separated putative column names (default: all others)")
    p.add_argument("--exclude", help="comma-separated columns to ignore")
    p.add_argument("--no-intercept", action="store_true", help="do not add an intercept column")
    p.add_argument("--logratio", action="store_true", help="log-ratio transform the putative columns")
    p.add_argument("--rescale", choices=["minmax", "zscore"], help="rescale the putative columns")
    p.add_argument("--reference", help="log-ratio reference column: 'last', a name or an index")
    p.add_argument("--zero-replacement", type=float)
    p.add_argument("--min-prevalence", type=float, help="drop putative columns nonzero in fewer rows")
    p.add_argument("--threads", type=int, help="worker threads (default: EBSEL_THREADS or 1)")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ebsel", description="Empirical Bayes variable selection")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fit = sub.add_parser("fit", help="fit the selection model to a CSV")
    _add_data_args(fit)
    fit.add_argument("--strategy", choices=["posterior_threshold", "greedy", "weighted"])
    fit.add_argument("--seed", type=int)
    fit.add_argument("--restarts", type=int, help="weighted-strategy restarts (default 20)")
    fit.add_argument("--null-threshold", type=float)
    fit.add_argument("--delta", type=float)
    fit.add_argument("--max-iter", type=int)
    fit.add_argument("--correlation-mode", choices=["guard", "shrink", "off"])
    fit.add_argument("--column-store", help="write putative columns to this file stem and fit from disk")

    sim = sub.add_parser("simulate", help="run the synthetic benchmark")
    sim.add_argument("--config")
    sim.add_argument("--n", type=int)
    sim.add_argument("--replicates", type=int)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--no-lasso", action="store_true")
    sim.add_argument("--lasso-repeats", type=int)
    sim.add_argument("--lasso-folds", type=int)
    sim.add_argument("--threads", type=int)
    sim.add_argument("--out")

    las = sub.add_parser("lasso", help="cross-validated LASSO baseline on a CSV")
    _add_data_args(las)
    las.add_argument("--folds", type=int)
    las.add_argument("--repeats", type=int)
    las.add_argument("--seed", type=int)

    tr = sub.add_parser("transform", help="transform columns of a CSV")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True, help="output CSV path")
    tr.add_argument("--logratio", action="store_true")
    tr.add_argument("--rescale", choices=["minmax", "zscore"])
    tr.add_argument("--reference", default="last")
    tr.add_argument("--zero-replacement", type=float, default=0.5)
    tr.add_argument("--min-prevalence", type=float)
    tr.add_argument("--keep", help="comma-separated columns copied through unchanged")

    sub.add_parser("version", help="print the version")
    return parser


def _transform_section(args) -> dict:
    if args.logratio and args.rescale:
        raise UsageError("--logratio and --rescale are mutually exclusive")
    mode = None
    if args.logratio:
        mode = "logratio"
    elif args.rescale:
        mode = {"minmax": "minmax_symmetric", "zscore": "zscore"}[args.rescale]
    ref = args.reference
    if ref is not None and ref.lstrip("-").isdigit():
        ref = int(ref)
    return {"mode": mode, "reference": ref, "zero_replacement": args.zero_replacement,
            "min_prevalence": args.min_prevalence}


def _run_doc(args, extra: dict) -> dict:
    base = load_config(args.config) if args.config else {}
    layout = {
        "response": args.response,
        "locked": _csv_list(args.locked),
        "putative": _csv_list(args.putative),
        "exclude": _csv_list(args.exclude),
        "intercept": False if args.no_intercept else None,
    }
    doc = merge(base, {"data": args.data, "layout": layout, "transform": _transform_section(args),
                       "output": args.out, "threads": args.threads, **extra})
    if not doc.get("layout") or "response" not in doc["layout"]:
        raise InputError("layout error: 'response' is a required property")
    validate_config(doc)
    if "data" not in doc:
        raise UsageError("--data is required (flag or config)")
    return doc


def _threads(doc: dict, flag) -> int:
    if flag is not None:
        if flag < 1:
            raise UsageError("--threads must be positive")
        return flag
    return threads_from_env(doc.get("threads", 1))


def cmd_fit(args) -> int:
    doc = _run_doc(args, {
        "em": {"strategy": args.strategy, "seed": args.seed, "null_threshold": args.null_threshold,
               "delta": args.delta, "max_iter": args.max_iter,
               "correlation_mode": args.correlation_mode},
        "restarts": args.restarts,
        "column_store": args.column_store,
    })
    threads = _threads(doc, args.threads)
    config = replace(em_config_from(doc), n_threads=threads)
    ing = ingest_csv(doc["data"], doc["layout"], doc.get("transform"), doc.get("column_store"))
    data = ing.data

    def refit_for(result):
        cols = sorted(result.selected_indices)
        design = np.column_stack([data.X, data.Z.fetch_many(cols)]) if cols else data.X
        names = data.x_names + [data.z_names[k] for k in cols]
        return ols_refit(data.y, design, names)

    extra = {}
    if config.strategy == "weighted":
        n_restarts = doc.get("restarts", 20)
        seeds = child_seeds(config.seed, n_restarts)

        def one(seed):
            res, tr = run_em(data, replace(config, seed=seed, n_threads=1))
            return res, tr, refit_for(res)

        if threads > 1 and n_restarts > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                runs = list(pool.map(one, seeds))
        else:
            runs = [one(s) for s in seeds]
        best = min(range(n_restarts), key=lambda i: (runs[i][2].aic, i))
        result, trace, refit = runs[best]
        extra["restarts"] = {
            "best": best,
            "runs": [{"seed": s, "aic": r[2].aic, "loglik": r[0].loglik,
                      "selected": [c.name for c in r[0].selected]} for s, r in zip(seeds, runs)],
        }
    else:
        result, trace = run_em(data, config)
        refit = refit_for(result)

    echo = {"em": config_echo(replace(config, n_threads=1)), "layout": doc["layout"],
            "transform": doc.get("transform", {}), "data": doc["data"],
            "restarts": doc.get("restarts", 20) if config.strategy == "weighted" else None}
    document = fit_document(result, trace, refit, echo, config.seed, data, extra)
    out = Path(doc.get("output", "ebsel-out"))
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "result.json", document)
    write_posteriors(out / "posteriors.csv", result, data.z_names)
    print(json.dumps({"selected": [c.name for c in result.selected],
                      "result": str(out / "result.json")}))
    return EXIT_OK


def cmd_simulate(args) -> int:
    base = load_config(args.config) if args.config else {}
    doc = merge(base, {
        "simulation": {"n": args.n, "replicates": args.replicates, "seed": args.seed,
                       "run_lasso": False if args.no_lasso else None},
        "lasso": {"repeats": args.lasso_repeats, "folds": args.lasso_folds},
        "output": args.out, "threads": args.threads,
    })
    validate_config(doc)
    threads = _threads(doc, args.threads)
    design = sim_design_from(doc)
    em_config = em_config_from(doc)
    lasso_config = lasso_config_from(doc)
    report = run_study(design, em_config, lasso_config, n_threads=threads)
    out = Path(doc.get("output", "ebsel-sim"))
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "replicates.csv")
    report.write_json(out / "summary.json")
    print(json.dumps({"summary": report.summary(), "design": design_to_dict(design)}, sort_keys=True))
    return EXIT_OK


def cmd_lasso(args) -> int:
    doc = _run_doc(args, {"lasso": {"folds": args.folds, "repeats": args.repeats, "seed": args.seed}})
    threads = _threads(doc, args.threads)
    config = replace(lasso_config_from(doc), n_threads=threads)
    ing = ingest_csv(doc["data"], doc["layout"], doc.get("transform"))
    data = ing.data
    Z = data.Z.to_array()
    cv = lasso_cv_select(data.y, Z, config)
    out = Path(doc.get("output", "ebsel-lasso"))
    out.mkdir(parents=True, exist_ok=True)
    body = cv.to_dict(data.z_names) | {"config": config_echo(replace(config, n_threads=1))}
    write_json(out / "lasso.json", body)
    write_table(out / "lasso_cv.csv", ["lambda", "cv_mse"], [cv.lambdas, cv.cv_mean])
    print(json.dumps({"selected": [data.z_names[k] for k in cv.selected], "lambda_star": cv.lambda_star}))
    return EXIT_OK


def cmd_transform(args) -> int:
    section = _transform_section(args)
    if section["mode"] is None:
        raise UsageError("choose --logratio or --rescale")
    table = read_table(args.data)
    keep = _csv_list(args.keep) or []
    missing = [k for k in keep if k not in table.names]
    if missing:
        raise InputError(f"--keep columns not in header: {missing}")
    work = [n for n in table.names if n not in keep]
    M, names, _ = apply_transform(table.columns(work), work, section)
    cols = [table.column(k) for k in keep] + [M[:, j] for j in range(M.shape[1])]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_table(args.out, keep + names, cols)
    return EXIT_OK


def cmd_version(args) -> int:
    print(f"ebsel {__version__}")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "lasso": cmd_lasso,
            "transform": cmd_transform, "version": cmd_version}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, InputError, DesignError, FileNotFoundError) as exc:
        _report(type(exc).__name__, str(exc), EXIT_USAGE)
        return EXIT_USAGE
    except (ComputationError, StudyAborted, np.linalg.LinAlgError) as exc:
        _report(type(exc).__name__, str(exc), EXIT_COMPUTE)
        return EXIT_COMPUTE
    except ValueError as exc:
        _report(type(exc).__name__, str(exc), EXIT_USAGE)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
