"""Simulation experiments: per-cell fits, MAE tables and misspecification sweeps.

A cell is one (region, replicate) pair.  The primary series of a region is
drawn once and shared by its replicates, which differ only in the secondary
noise.  Cells are independent, so they may run in worker processes; results
are collected and written in a fixed order, so outputs do not depend on
scheduling.
"""

from __future__ import annotations

import hashlib
import json
import logging
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import REALTIME, RETROSPECTIVE, ExperimentConfig
from .core import (
    CountSeries,
    DegenerateError,
    DelayDistribution,
    ParameterError,
    SeverityCurve,
    day_offset,
    discretized_gamma,
)
from .io import fmt_float, read_counts, read_variants, with_rates, write_estimates, \
    write_table
from .simulate import (
    PRESETS,
    SD_RATIO,
    NoiseModel,
    Region,
    build_region,
    misspecify_delay,
    sample_secondary,
    variant_hfr_curve,
)
from .solver import (
    DeconvSpec,
    build_problem,
    lambda_max_exact,
    solve_realtime,
    solve_retrospective,
)
from .tune import (
    Grid,
    Method,
    cell_mae,
    cv_deconv,
    cv_ratio,
    forward_validate_ratio,
    lambda_grid,
    mae_report,
    ratio_estimate,
    tune_realtime_rules,
)

log = logging.getLogger(__name__)

ORACLE = "oracle"
MIN_SCAN_OVERLAP = 90


# ---------------------------------------------------------------------------
# delay mean from cross-correlation


def delay_mean_scan(X: CountSeries, Y: CountSeries, max_lag: int = 45, min_lag: int = 0) -> int:
    """Lag (days) maximizing the Pearson correlation of ``X_{t-lag}`` and ``Y_t``.

    Ties go to the smaller lag.  Each lag needs at least 90 overlapping days.
    """
    if min_lag < 0 or max_lag < min_lag:
        raise ParameterError("lag range must satisfy 0 <= min_lag <= max_lag")
    best, best_lag = -np.inf, None
    for lag in range(min_lag, max_lag + 1):
        # Y_t pairs with X_{t-lag}: both on the day axis of X
        y_lo = max(day_offset(Y.origin, X.origin + timedelta(days=lag)), 0)
        y_hi = min(len(Y), day_offset(Y.origin, X.end + timedelta(days=lag)) + 1)
        if y_hi - y_lo < MIN_SCAN_OVERLAP:
            raise ParameterError(f"lag {lag}: fewer than {MIN_SCAN_OVERLAP} overlapping days")
        y = Y.values[y_lo:y_hi].astype(float)
        x_lo = day_offset(X.origin, Y.origin + timedelta(days=y_lo - lag))
        x = X.values[x_lo:x_lo + y.size].astype(float)
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            raise DegenerateError("correlation is undefined for a constant series")
        r = float(np.corrcoef(x, y)[0, 1])
        if r > best:
            best, best_lag = r, lag
    return int(best_lag)


# ---------------------------------------------------------------------------
# evaluation plan and cell results


@dataclass(frozen=True)
class EvalPlan:
    burn_in: int = 184
    burn_out: int = 88
    step: int = 7

    def indices(self, n: int) -> np.ndarray:
        idx = np.arange(self.burn_in, n - self.burn_out, self.step)
        if idx.size == 0:
            raise ParameterError(f"no evaluation days left in a series of length {n}")
        return idx


@dataclass
class CellFit:
    """Estimates of one method under one selection rule at the evaluation days."""

    method: str
    rule: str
    values: np.ndarray
    clipped: np.ndarray
    hyper: list = field(default_factory=list)   # (date or None, parameter, value)


@dataclass
class CellResult:
    region: str
    replicate: int
    offset: float
    eval_days: list
    truth: np.ndarray
    fits: list = field(default_factory=list)
    error: str = ""


def _on_axis(curve: SeverityCurve, origin: date, n: int) -> np.ndarray:
    out = np.full(n, np.nan)
    lo = day_offset(origin, curve.origin)
    src = max(0, -lo)
    dst = max(0, lo)
    count = min(len(curve) - src, n - dst)
    if count > 0:
        out[dst:dst + count] = curve.values[src:src + count]
    return out


def _lam_grid(prob, config: ExperimentConfig) -> Grid:
    return lambda_grid(lambda_max_exact(prob), config.lambda_count, config.lambda_ratio)


def retrospective_fits(X, Y, delay, methods, rules, eval_idx, config: ExperimentConfig,
                       truth: np.ndarray | None = None) -> list[CellFit]:
    """CV-tuned retrospective estimates; with ``truth``, also the oracle choice."""
    n = len(X)
    fits = []
    for method in methods:
        if method.kind == "deconv":
            prob = build_problem(X, Y, delay, DeconvSpec("poisson", method.order))
            curve = cv_deconv(prob, _lam_grid(prob, config), config.K)

            def estimate(v, method=method):
                fit = solve_retrospective(X, Y, delay, method.order, v)
                return _on_axis(fit.curve, X.origin, n), np.zeros(n, bool)
            param = "lambda"
        else:
            curve = cv_ratio(X, Y, delay, method, Grid(config.windows), config.K)

            def estimate(v, method=method):
                est = ratio_estimate(X, Y, delay, method, int(v), realtime=False)
                return np.asarray(est.values, float), est.clipped
            param = "window"
        cache = {}
        for rule in rules:
            v = curve.selected(rule)
            if v not in cache:
                cache[v] = estimate(v)
            vals, clip = cache[v]
            fits.append(CellFit(method.name, rule, vals[eval_idx], clip[eval_idx],
                                [(None, param, v)]))
        if truth is not None:
            best = None
            for v in curve.values:
                vals, clip = cache[v] if v in cache else estimate(v)
                err = cell_mae(vals[eval_idx], truth)
                if best is None or err < best[0]:
                    best = (err, v, vals, clip)
            fits.append(CellFit(method.name, ORACLE, best[2][eval_idx], best[3][eval_idx],
                                [(None, param, best[1])]))
    return fits


def realtime_fits(X, Y, delay, methods, rules, eval_idx, config: ExperimentConfig) -> list[CellFit]:
    """Real-time estimates at each evaluation day using data through that day.

    Hyperparameters are re-selected every ``config.retune_every`` days: the
    deconvolution by the two-stage procedure on a trailing window of
    ``config.fit_window`` days, the ratios by forward validation of the window.
    """
    days = [X.origin + timedelta(days=int(i)) for i in eval_idx]
    gammas = Grid(config.gammas)
    windows = Grid(config.windows)
    fits = []
    for method in methods:
        if method.kind == "deconv":
            dec_rules = tuple(config.realtime_deconv_rules)
            vals = {r: np.full(len(days), np.nan) for r in dec_rules}
            hyper = {r: [] for r in dec_rules}
            tuned, last = None, None
            for k, T in enumerate(days):
                if tuned is None or (T - last).days >= config.retune_every:
                    tuned = tune_realtime_rules(X, Y, delay, method.order, T, dec_rules,
                                                window=config.fit_window, K=config.K,
                                                M=config.M, gamma_grid=gammas)
                    last = T
                    for r in dec_rules:
                        hyper[r] += [(T, "lambda", tuned[r].lam), (T, "gamma", tuned[r].gamma)]
                done = {}
                for r in dec_rules:
                    key = (tuned[r].lam, tuned[r].gamma)
                    if key not in done:
                        done[key] = solve_realtime(X, Y, delay, method.order, key[0], key[1], T,
                                                   window=config.fit_window).estimate
                    vals[r][k] = done[key]
            fits += [CellFit(method.name, r, vals[r], np.zeros(len(days), bool), hyper[r])
                     for r in dec_rules]
            continue
        by_window = {}
        for w in windows:
            est = ratio_estimate(X, Y, delay, method, int(w), realtime=True)
            by_window[w] = (np.asarray(est.values, float), est.clipped)
        vals = {r: np.full(len(days), np.nan) for r in rules}
        clip = {r: np.zeros(len(days), bool) for r in rules}
        hyper = {r: [] for r in rules}
        curve, last = None, None
        for k, (T, i) in enumerate(zip(days, eval_idx)):
            if curve is None or (T - last).days >= config.retune_every:
                curve = forward_validate_ratio(X, Y, delay, method, windows, T, config.M)
                last = T
                for r in rules:
                    hyper[r].append((T, "window", curve.selected(r)))
            for r in rules:
                est, flags = by_window[curve.selected(r)]
                vals[r][k] = est[i]
                clip[r][k] = flags[i]
        fits += [CellFit(method.name, r, vals[r], clip[r], hyper[r]) for r in rules]
    return fits


# ---------------------------------------------------------------------------
# regions and cells


def experiment_region(config: ExperimentConfig, index: int) -> Region:
    """The region (primary series, true rates and delay) shared by all replicates."""
    realtime = config.setting == REALTIME
    if config.primary_file:
        X = read_counts(config.primary_file)
        variants = with_rates(read_variants(config.variants_file), config.rates_by_variant())
        p_full = variant_hfr_curve(variants)
        p = SeverityCurve(X.origin, _on_axis(p_full, X.origin, len(X)))
        if np.any(np.isnan(p.values)):
            raise ParameterError("variant proportions must cover every primary date")
        mean = config.delay_mean if config.delay_mean > 0 else 14.0
        delay = discretized_gamma(mean, SD_RATIO * mean, config.delay_support)
        return Region("file", X, p, delay, variants, 1.0)
    preset = PRESETS[config.regions[index]]
    return build_region(preset, config.seed, (index,), realtime=realtime)


def _estimation_delay(config: ExperimentConfig, region: Region, Y: CountSeries,
                      offset: float) -> DelayDistribution:
    delay = region.delay
    if config.delay_source == "scan":
        mean = delay_mean_scan(region.X, Y, config.scan_max_lag)
        delay = discretized_gamma(mean, SD_RATIO * mean, delay.d)
    elif config.delay_mean > 0 and not config.primary_file:
        delay = discretized_gamma(config.delay_mean, SD_RATIO * config.delay_mean, delay.d)
    if offset:
        delay = misspecify_delay(delay, offset)
    return delay


def run_cell(config: ExperimentConfig, index: int, replicate: int, offset: float = 0.0,
             oracle: bool = False) -> CellResult:
    region = experiment_region(config, index)
    noise = NoiseModel(config.noise_model, region.beta)
    Y = sample_secondary(region, noise, config.seed, index, replicate, 1)
    plan = EvalPlan(config.burn_in, config.burn_out, config.cadence)
    eval_idx = plan.indices(len(region.X))
    truth = _on_axis(region.p, region.X.origin, len(region.X))[eval_idx]
    days = [region.X.origin + timedelta(days=int(i)) for i in eval_idx]
    result = CellResult(region.name, replicate, offset, days, truth)
    try:
        delay = _estimation_delay(config, region, Y, offset)
        methods = [Method.parse(m) for m in config.methods]
        if config.setting == RETROSPECTIVE:
            result.fits = retrospective_fits(region.X, Y, delay, methods, config.rules, eval_idx,
                                             config, truth if oracle else None)
        else:
            result.fits = realtime_fits(region.X, Y, delay, methods, config.rules, eval_idx,
                                        config)
    except (ArithmeticError, ValueError, RuntimeError) as err:
        log.error("cell %s/%d failed: %s", region.name, replicate, err)
        result.error = f"{type(err).__name__}: {err}"
    return result


def _run_cells(config: ExperimentConfig, jobs: list[tuple]) -> list[CellResult]:
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            return list(pool.map(run_cell, *zip(*jobs)))
    return [run_cell(*job) for job in jobs]


# ---------------------------------------------------------------------------
# summaries


@dataclass(frozen=True)
class MethodSummary:
    method: str
    rule: str
    mae: float
    se: float | None
    improvement: dict


def _stack(cells: list[CellResult], method: str, rule: str, regions: list[str]) -> np.ndarray:
    """(regions, replicates, n_eval) estimates; failed cells are all-NaN."""
    n_rep = max(c.replicate for c in cells) + 1
    n_eval = len(cells[0].eval_days)
    out = np.full((len(regions), n_rep, n_eval), np.nan)
    for c in cells:
        for f in c.fits:
            if f.method == method and f.rule == rule:
                out[regions.index(c.region), c.replicate] = f.values
    return out


def _truth(cells: list[CellResult], regions: list[str]) -> np.ndarray:
    n_rep = max(c.replicate for c in cells) + 1
    out = np.full((len(regions), n_rep, len(cells[0].eval_days)), np.nan)
    for c in cells:
        out[regions.index(c.region), c.replicate] = c.truth
    return out


def summarize(cells: list[CellResult], methods: list[str], rules) -> tuple[list, list]:
    """Per-rule rows and per-method rows using each method's most favorable rule."""
    regions = list(dict.fromkeys(c.region for c in cells))
    truth = _truth(cells, regions)
    by_rule = []
    chosen = {}
    for m in methods:
        best = None
        for r in rules:
            est = _stack(cells, m, r, regions)
            if np.all(np.isnan(est)):
                continue
            row = mae_report({m: est}, truth)[0]
            by_rule.append(MethodSummary(m, r, row.mae, row.se, {}))
            if r != ORACLE and (best is None or row.mae < best[1]):
                best = (r, row.mae, est)
        if best is not None:
            chosen[m] = best
    rows = mae_report({m: v[2] for m, v in chosen.items()}, truth)
    summary = [MethodSummary(r.method, chosen[r.method][0], r.mae, r.se, r.improvement)
               for r in rows]
    oracle = {m: _stack(cells, m, ORACLE, regions) for m in methods}
    oracle = {m: v for m, v in oracle.items() if not np.all(np.isnan(v))}
    if oracle:
        summary += [MethodSummary(r.method, ORACLE, r.mae, r.se, r.improvement)
                    for r in mae_report(oracle, truth)]
    return by_rule, summary


def _summary_rows(rows: list[MethodSummary]):
    out = []
    for r in rows:
        se = "" if r.se is None else fmt_float(1e3 * r.se)
        out.append((r.method, r.rule, fmt_float(1e3 * r.mae), se,
                    fmt_float(r.improvement["conv"]) if "conv" in r.improvement else "",
                    fmt_float(r.improvement["lagged"]) if "lagged" in r.improvement else ""))
    return out


SUMMARY_HEADER = ("method", "rule", "mae_x1000", "se_x1000", "improvement_vs_conv_pct",
                  "improvement_vs_lagged_pct")


# ---------------------------------------------------------------------------
# drivers


def _file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_cells(out: Path, cells: list[CellResult], tag: str = "") -> None:
    hyper_rows, fail_rows = [], []
    for c in cells:
        name = f"{c.region}_rep{c.replicate:02d}{tag}.csv"
        rows = []
        for f in c.fits:
            label = f"{f.method}:{f.rule}"
            for day, v, flag in zip(c.eval_days, f.values, f.clipped):
                rows.append((day.isoformat(), label, fmt_float(v), int(flag)))
            hyper_rows += [(c.region, c.replicate, fmt_float(c.offset), f.method, f.rule,
                            "" if d is None else d.isoformat(), param, fmt_float(val))
                           for d, param, val in f.hyper]
        truth_rows = [(d.isoformat(), "truth", fmt_float(v), 0)
                      for d, v in zip(c.eval_days, c.truth)]
        write_estimates(out / "estimates" / name, truth_rows + rows)
        if c.error:
            fail_rows.append((c.region, c.replicate, fmt_float(c.offset), c.error))
    write_table(out / f"hyperparameters{tag}.csv",
                ("region", "replicate", "offset", "method", "rule", "date", "parameter", "value"),
                hyper_rows)
    write_table(out / f"failures{tag}.csv", ("region", "replicate", "offset", "error"), fail_rows)


def _write_manifest(out: Path, config: ExperimentConfig, cells: list[CellResult],
                    command: str) -> None:
    outputs = sorted(p for p in out.rglob("*.csv"))
    manifest = {
        "command": command,
        "config": config.to_text().splitlines(),
        "config_sha256": config.digest(),
        "seed": config.seed,
        "cells": [{"region": c.region, "replicate": c.replicate, "offset": c.offset,
                   "noise_stream": [config.regions.index(c.region)
                                    if c.region in config.regions else 0, c.replicate, 1],
                   "status": "failed" if c.error else "ok"} for c in cells],
        "versions": {"sevdeconv": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "python": platform.python_version()},
        "outputs": {str(p.relative_to(out)): _file_digest(p) for p in outputs},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")


def _jobs(config: ExperimentConfig, offset: float = 0.0, oracle: bool = False) -> list[tuple]:
    n_regions = 1 if config.primary_file else len(config.regions)
    return [(config, r, i, offset, oracle) for r in range(n_regions)
            for i in range(config.replicates)]


def run_experiment(config: ExperimentConfig, out_dir) -> dict:
    """Run every cell and write estimates, hyperparameters, summaries and a manifest.

    Returns ``{"by_rule": [...], "summary": [...], "cells": [...]}``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = _run_cells(config, _jobs(config, oracle=config.oracle))
    rules = tuple(config.rules) + ((ORACLE,) if config.oracle else ())
    if config.setting == REALTIME:
        rules = tuple(dict.fromkeys(rules + tuple(config.realtime_deconv_rules)))
    by_rule, summary = summarize(cells, list(config.methods), rules)
    _write_cells(out, cells)
    write_table(out / "summary.csv", SUMMARY_HEADER, _summary_rows(summary))
    write_table(out / "summary_by_rule.csv", SUMMARY_HEADER, _summary_rows(by_rule))
    _write_manifest(out, config, cells, "evaluate")
    return {"by_rule": by_rule, "summary": summary, "cells": cells}


def run_misspec_sweep(config: ExperimentConfig, out_dir) -> dict:
    """MAE of every method when the estimators use a delay with shifted mean.

    Returns ``{offset: [MethodSummary, ...]}`` using each method's most
    favorable rule at that offset.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results, rows, all_cells = {}, [], []
    rules = tuple(config.rules)
    if config.setting == REALTIME:
        rules = tuple(dict.fromkeys(rules + tuple(config.realtime_deconv_rules)))
    for offset in config.offsets:
        cells = _run_cells(config, _jobs(config, float(offset)))
        _, summary = summarize(cells, list(config.methods), rules)
        results[offset] = summary
        rows += [(str(offset),) + row for row in _summary_rows(summary)]
        _write_cells(out, cells, tag=f"_offset{offset:+d}")
        all_cells += cells
    write_table(out / "misspec.csv", ("offset",) + SUMMARY_HEADER, rows)
    _write_manifest(out, config, all_cells, "sweep-misspec")
    return results
