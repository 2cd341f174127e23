"""Command-line driver: ``sevdeconv <subcommand> ...``.

Subcommands: ``simulate``, ``clean``, ``fit``, ``tune``, ``evaluate`` and
``sweep-misspec``.  Failures print a JSON error report on stderr and exit
with status 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from datetime import date
from pathlib import Path

import numpy as np

from .clean import (
    IQR_MULT,
    OUTLIER_WINDOW,
    deweekify,
    impute_daily,
    outlier_truncate,
    redistribute_dumps,
    redistribute_negatives,
)
from .config import REALTIME, RETROSPECTIVE, SETTINGS, ExperimentConfig, load_config
from .core import CountSeries, SeverityCurve, day_offset, discretized_gamma
from .experiment import delay_mean_scan, run_experiment, run_misspec_sweep
from .io import (
    estimate_rows,
    fmt_float,
    read_counts,
    read_raw_counts,
    write_counts,
    write_estimates,
    write_rates,
    write_table,
    write_variants,
)
from .simulate import PRESETS, SD_RATIO, NoiseModel, build_region, sample_secondary
from .solver import solve_realtime, solve_retrospective
from .tune import (
    DEFAULT_K,
    DEFAULT_M,
    MIN_RULE,
    RULES,
    Grid,
    Method,
    WINDOW_GRID,
    cv_tune,
    forward_validate_ratio,
    ratio_estimate,
    tune_realtime,
)

CLEAN_STEPS = ("dumps", "negatives", "truncate", "deweekify")
DEFAULT_CLEAN = ("dumps", "negatives", "deweekify")


class UsageError(ValueError):
    """Inconsistent command-line arguments."""


# ---------------------------------------------------------------------------
# shared helpers


def _date(text: str) -> date:
    try:
        return date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date: {text!r}") from None


def _delay(args, X: CountSeries, Y: CountSeries):
    if args.delay_mean is not None:
        mean = args.delay_mean
    else:
        mean = delay_mean_scan(X, Y, args.scan_max_lag)
    return discretized_gamma(mean, SD_RATIO * mean, args.delay_support)


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--primary", required=True, help="primary counts CSV (date,count)")
    p.add_argument("--secondary", required=True, help="secondary counts CSV (date,count)")
    p.add_argument("--method", default="deconv-0", help="deconv-<order>, conv or lagged")
    p.add_argument("--setting", choices=SETTINGS, default=RETROSPECTIVE)
    p.add_argument("--delay-mean", type=float, default=None,
                   help="delay mean in days (sd = 0.9 x mean); scanned when omitted")
    p.add_argument("--scan-max-lag", type=int, default=45)
    p.add_argument("--delay-support", type=int, default=60)
    p.add_argument("--T", type=_date, default=None, dest="T",
                   help="real-time estimation date (default: last secondary date)")
    p.add_argument("--fit-window", type=int, default=None,
                   help="days of secondary data in a real-time fit (default: all)")
    p.add_argument("--rule", choices=RULES, default=MIN_RULE)
    p.add_argument("-K", type=int, default=DEFAULT_K, dest="K")
    p.add_argument("-M", type=int, default=DEFAULT_M, dest="M")


def _load(args):
    X = read_counts(args.primary)
    Y = read_counts(args.secondary)
    return X, Y, _delay(args, X, Y)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> dict:
    preset = PRESETS[args.region]
    realtime = args.setting == REALTIME
    region = build_region(preset, args.seed, (args.region_index,), realtime=realtime)
    kind = args.noise or ("beta_binomial" if realtime else "poisson_binomial")
    Y = sample_secondary(region, NoiseModel(kind, region.beta), args.seed, args.region_index,
                         args.replicate, 1)
    out = Path(args.out)
    write_counts(out / "primary.csv", region.X)
    write_counts(out / "secondary.csv", Y)
    write_rates(out / "truth.csv", region.p)
    write_variants(out / "variants.csv", region.variants)
    write_table(out / "delay.csv", ("lag", "probability"),
                [(k, fmt_float(v)) for k, v in enumerate(region.delay.at(region.X.origin))])
    return {"region": region.name, "days": len(region.X), "delay_mean_days": region.delay.mean_days,
            "noise": kind, "out": str(out)}


def cmd_clean(args) -> dict:
    if args.weekly:
        origin, weekly = read_raw_counts(args.input)
        daily = impute_daily(weekly, args.seed, origin=origin)
        write_counts(args.output, daily)
        return {"input_total": int(weekly.sum()), "output_total": int(daily.values.sum())}
    origin, vals = read_raw_counts(args.input)
    steps = tuple(s.strip() for s in args.steps.split(",") if s.strip())
    bad = [s for s in steps if s not in CLEAN_STEPS]
    if bad:
        raise UsageError(f"unknown cleaning steps {bad}; choose from {CLEAN_STEPS}")
    report = {"input_total": int(vals.sum()), "steps": list(steps)}
    for k, step in enumerate(steps):
        if step == "dumps":
            vals = redistribute_dumps(vals, args.seed, k)
        elif step == "negatives":
            vals = redistribute_negatives(vals, args.seed, k)
        elif step == "truncate":
            before = int(vals.sum())
            vals = outlier_truncate(vals, args.window, args.iqr_mult)
            report["truncation_total_change"] = int(vals.sum()) - before
        else:
            vals = deweekify(vals, args.seed, k, window=args.window, iqr_mult=args.iqr_mult)
    if np.any(vals < 0):
        raise UsageError("negative counts remain; include the 'negatives' step")
    write_counts(args.output, CountSeries(origin, vals))
    report["output_total"] = int(vals.sum())
    return report


def _tuned_value(args, X, Y, delay, method):
    if args.setting == RETROSPECTIVE:
        value, curve = cv_tune(X, Y, delay, method, K=args.K, rule=args.rule)
        return value, None, curve, None
    T = args.T or Y.end
    if method.kind == "deconv":
        tuned = tune_realtime(X, Y, delay, method.order, T, window=args.fit_window, K=args.K,
                              M=args.M, lam_rule=args.rule, gamma_rule=args.rule)
        return tuned.lam, tuned.gamma, tuned.lam_curve, tuned.gamma_curve
    curve = forward_validate_ratio(X, Y, delay, method, Grid(WINDOW_GRID), T, args.M)
    return curve.selected(args.rule), None, curve, None


def cmd_fit(args) -> dict:
    X, Y, delay = _load(args)
    method = Method.parse(args.method)
    param = args.lam if method.kind == "deconv" else args.smoothing_window
    gamma = args.gamma
    if param is None or (method.kind == "deconv" and args.setting == REALTIME and gamma is None):
        tuned, tuned_gamma, _, _ = _tuned_value(args, X, Y, delay, method)
        param = tuned if param is None else param
        gamma = tuned_gamma if gamma is None else gamma
    if method.kind == "deconv":
        if args.setting == RETROSPECTIVE:
            fit = solve_retrospective(X, Y, delay, method.order, param)
        else:
            fit = solve_realtime(X, Y, delay, method.order, param, gamma, args.T or Y.end,
                                 window=args.fit_window)
        curve, clipped = fit.curve, None
        info = {"lambda": param, "gamma": gamma, "converged": fit.converged,
                "objective": fit.objective, "knots": len(fit.knots)}
    else:
        realtime = args.setting == REALTIME
        Y_used = Y
        if realtime and args.T is not None:
            Y_used = CountSeries(Y.origin, Y.values[:day_offset(Y.origin, args.T) + 1])
        est = ratio_estimate(X, Y_used, delay, method, int(param), realtime)
        curve, clipped = est.curve, est.clipped
        if realtime:
            end = day_offset(curve.origin, Y_used.end) + 1
            curve = SeverityCurve(curve.origin, curve.values[:end])
            clipped = clipped[:end]
        info = {"window": int(param), "clipped_fraction": est.clipped_fraction}
    write_estimates(args.out, estimate_rows(curve.origin, method.name, curve.values, clipped))
    info.update({"method": method.name, "setting": args.setting,
                 "delay_mean_days": delay.mean_days,
                 "out": str(args.out)})
    return info


def _curve_rows(stage, curve):
    return [(stage, fmt_float(v), fmt_float(e), fmt_float(s))
            for v, e, s in zip(curve.values, curve.errors, curve.se)]


def cmd_tune(args) -> dict:
    X, Y, delay = _load(args)
    method = Method.parse(args.method)
    value, gamma, curve, gamma_curve = _tuned_value(args, X, Y, delay, method)
    stage = "lambda" if method.kind == "deconv" else "window"
    rows = _curve_rows(stage, curve)
    if gamma_curve is not None:
        rows += _curve_rows("gamma", gamma_curve)
    write_table(args.out, ("parameter", "value", "error", "se"), rows)
    out = {"method": method.name, "setting": args.setting, "rule": args.rule, stage: value}
    if gamma is not None:
        out["gamma"] = gamma
    return out


def _experiment_config(args) -> ExperimentConfig:
    overrides = {f.name: getattr(args, f"cfg_{f.name}") for f in fields(ExperimentConfig)
                 if getattr(args, f"cfg_{f.name}") is not None}
    return load_config(args.config, overrides)


def _summary_json(rows) -> list:
    return [{"method": r.method, "rule": r.rule, "mae_x1000": 1e3 * r.mae,
             "se_x1000": None if r.se is None else 1e3 * r.se,
             "improvement_pct": r.improvement} for r in rows]


def cmd_evaluate(args) -> dict:
    config = _experiment_config(args)
    result = run_experiment(config, args.out)
    failed = sum(1 for c in result["cells"] if c.error)
    return {"out": str(args.out), "failed_cells": failed,
            "summary": _summary_json(result["summary"])}


def cmd_sweep(args) -> dict:
    config = _experiment_config(args)
    result = run_misspec_sweep(config, args.out)
    return {"out": str(args.out),
            "offsets": {str(k): _summary_json(v) for k, v in result.items()}}


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="flat key = value config file")
    p.add_argument("--out", required=True, help="results directory")
    group = p.add_argument_group("config keys (override the file)")
    for f in fields(ExperimentConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", default=None,
                           metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sevdeconv",
                                     description="Severity rate estimation by deconvolution")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic region and secondary counts")
    p.add_argument("--region", choices=sorted(PRESETS), default="medium")
    p.add_argument("--region-index", type=int, default=0, help="random stream of the region")
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--setting", choices=SETTINGS, default=RETROSPECTIVE)
    p.add_argument("--noise", choices=("poisson_binomial", "beta_binomial"), default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(run=cmd_simulate)

    p = sub.add_parser("clean", help="clean reported counts or impute days from weeks")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", default=",".join(DEFAULT_CLEAN),
                   help=f"comma list from {','.join(CLEAN_STEPS)}")
    p.add_argument("--window", type=int, default=OUTLIER_WINDOW)
    p.add_argument("--iqr-mult", type=float, default=IQR_MULT)
    p.add_argument("--weekly", action="store_true",
                   help="input holds weekly totals; expand them to days")
    p.set_defaults(run=cmd_clean)

    p = sub.add_parser("fit", help="estimate the severity curve")
    _add_data_args(p)
    p.add_argument("--lam", type=float, default=None, help="penalty (tuned when omitted)")
    p.add_argument("--gamma", type=float, default=None, help="real-time tail penalty")
    p.add_argument("--smoothing-window", type=int, default=None,
                   help="ratio smoothing window (tuned when omitted)")
    p.add_argument("--out", required=True, help="estimates CSV")
    p.set_defaults(run=cmd_fit)

    p = sub.add_parser("tune", help="write validation curves and the selected values")
    _add_data_args(p)
    p.add_argument("--out", required=True, help="validation curve CSV")
    p.set_defaults(run=cmd_tune)

    p = sub.add_parser("evaluate", help="run the simulation experiment")
    _add_config_flags(p)
    p.set_defaults(run=cmd_evaluate)

    p = sub.add_parser("sweep-misspec", help="run the delay misspecification sweep")
    _add_config_flags(p)
    p.set_defaults(run=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        report = args.run(args)
    except (ValueError, ArithmeticError, RuntimeError, OSError) as err:
        json.dump({"status": "error", "command": args.command, "error": type(err).__name__,
                   "message": str(err)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    json.dump({"status": "ok", "command": args.command, **report}, sys.stdout, indent=2,
              default=str)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
