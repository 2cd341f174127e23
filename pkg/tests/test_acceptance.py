"""End-to-end acceptance checks, one recorded verdict per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the verdict lines appear in
the "acceptance criteria" section of the terminal summary.  The experiment
runs take roughly an hour on one CPU.
"""

import time
from datetime import date

import numpy as np
import pytest

from conftest import random_instance, record_criterion
from reference import reference_solve
from sevdeconv.clean import (
    clean_pipeline,
    deweekify,
    impute_daily,
    redistribute_dumps,
    redistribute_negatives,
    weekly_spectral_mass,
)
from sevdeconv.config import REALTIME, ExperimentConfig
from sevdeconv.core import (
    CountSeries,
    DelayDistribution,
    SeverityCurve,
    correlation_bound,
    expected_secondary,
    poisson_tv_bound,
)
from sevdeconv.experiment import ORACLE, run_experiment, run_misspec_sweep
from sevdeconv.simulate import national_preset, sample_beta_binomial, sample_poisson_binomial
from sevdeconv.solver import DeconvSpec, build_problem, lambda_max_bound, solve, solve_retrospective

pytestmark = pytest.mark.slow

RETRO_BUDGET_S = 30 * 60
REALTIME_BUDGET_S = 60 * 60
DRAWS = 10_000


def summary_by(rows, rule_filter):
    return {r.method: r for r in rows if rule_filter(r.rule)}


@pytest.fixture(scope="module")
def retrospective_run(tmp_path_factory):
    config = ExperimentConfig(oracle=True)
    start = time.perf_counter()
    result = run_experiment(config, tmp_path_factory.mktemp("retro"))
    return result, time.perf_counter() - start


# 1 --------------------------------------------------------------------------------------


def test_retrospective_ordering_and_margin(retrospective_run):
    result, elapsed = retrospective_run
    rows = summary_by(result["summary"], lambda r: r != ORACLE)
    deconv, conv, lagged = rows["deconv-0"], rows["conv"], rows["lagged"]
    imp_conv = deconv.improvement["conv"]
    imp_lagged = deconv.improvement["lagged"]
    failed = sum(1 for c in result["cells"] if c.error)
    passed = (deconv.mae < conv.mae < lagged.mae and imp_conv >= 5 and imp_lagged >= 30
              and elapsed <= RETRO_BUDGET_S and failed == 0)
    detail = (f"MAE x1e3 deconv-0 {1e3 * deconv.mae:.3f} conv {1e3 * conv.mae:.3f} "
              f"lagged {1e3 * lagged.mae:.3f}; improvement vs conv {imp_conv:.1f}% "
              f"(need >= 5), vs lagged {imp_lagged:.1f}% (need >= 30); "
              f"{elapsed / 60:.1f} min (budget 30, includes oracle fits); failed cells {failed}")
    record_criterion(1, passed, detail)
    assert passed, detail


# 2 --------------------------------------------------------------------------------------


def test_realtime_ordering(tmp_path):
    config = ExperimentConfig(setting=REALTIME)
    start = time.perf_counter()
    result = run_experiment(config, tmp_path)
    elapsed = time.perf_counter() - start
    rows = summary_by(result["summary"], lambda r: r != ORACLE)
    deconv = rows["deconv-0"]
    imp_conv = deconv.improvement["conv"]
    imp_lagged = deconv.improvement["lagged"]
    failed = sum(1 for c in result["cells"] if c.error)
    passed = imp_conv >= 5 and imp_lagged >= 20 and elapsed <= REALTIME_BUDGET_S and failed == 0
    detail = (f"MAE x1e3 deconv-0 {1e3 * deconv.mae:.3f} conv {1e3 * rows['conv'].mae:.3f} "
              f"lagged {1e3 * rows['lagged'].mae:.3f}; improvement vs conv {imp_conv:.1f}% "
              f"(need >= 5), vs lagged {imp_lagged:.1f}% (need >= 20); "
              f"{elapsed / 60:.1f} min (budget 60); failed cells {failed}")
    record_criterion(2, passed, detail)
    assert passed, detail


# 3 --------------------------------------------------------------------------------------


def test_oracle_tuning_widens_gap(retrospective_run):
    result, _ = retrospective_run
    cv = summary_by(result["summary"], lambda r: r != ORACLE)["deconv-0"]
    oracle = summary_by(result["summary"], lambda r: r == ORACLE)["deconv-0"]
    cv_gap, oracle_gap = cv.improvement["conv"], oracle.improvement["conv"]
    passed = oracle_gap > cv_gap
    detail = (f"improvement vs conv: oracle-tuned {oracle_gap:.1f}% vs CV-tuned {cv_gap:.1f}% "
              f"(need oracle > CV)")
    record_criterion(3, passed, detail)
    assert passed, detail


# 4 --------------------------------------------------------------------------------------


def test_solver_matches_reference_and_gradient():
    rng = np.random.default_rng(404)
    worst_obj = 0.0
    for i in range(20):
        d = int(rng.integers(0, 3))
        n_y = int(rng.integers(4, 13 - d))
        order = i % 3
        if n_y + d <= order + 1:
            n_y = order + 2
        X, Y, delay = random_instance(rng, n_y, d, rate=rng.uniform(0.05, 0.9, n_y + d))
        lam = float(rng.choice([0.0, 0.05, 0.5, 2.0]))
        prob = build_problem(X, Y, delay, DeconvSpec("poisson", order, lam))
        assert prob.n <= 12
        fit = solve(prob, polish=True)
        _, ref = reference_solve(prob)
        worst_obj = max(worst_obj, abs(fit.objective - ref) / max(abs(ref), 1e-12))

    X, Y, delay = random_instance(rng, 10, 2)
    prob = build_problem(X, Y, delay, DeconvSpec("poisson", 1, 0.0, 0.7, False), T=Y.end)
    h = 1e-6
    worst_grad = 0.0
    for _ in range(10):
        p = rng.uniform(0.05, 0.95, prob.n)
        g = prob.smooth_grad(p)
        fd = np.array([(prob.loss(p + h * e) + prob.quad(p + h * e)
                        - prob.loss(p - h * e) - prob.quad(p - h * e)) / (2 * h)
                       for e in np.eye(prob.n)])
        worst_grad = max(worst_grad, np.linalg.norm(g - fd) / np.linalg.norm(fd))
    passed = worst_obj <= 1e-5 and worst_grad <= 1e-5
    detail = (f"worst relative objective gap {worst_obj:.2e} over 20 instances (need <= 1e-5); "
              f"worst relative gradient error {worst_grad:.2e} over 10 points (need <= 1e-5)")
    record_criterion(4, passed, detail)
    assert passed, detail


# 5 --------------------------------------------------------------------------------------


def test_lambda_max_gives_knot_free_fit():
    rng = np.random.default_rng(505)
    worst = 0.0
    for i in range(10):
        order = i % 2
        d = int(rng.integers(1, 6))
        n_y = int(rng.integers(20, 60))
        wave = np.sin(np.arange(n_y + d) / rng.uniform(2, 9))
        X, Y, delay = random_instance(rng, n_y, d, rate=0.3 + 0.15 * wave)
        lam = lambda_max_bound(X, Y, delay, order)
        fit = solve_retrospective(X, Y, delay, order, lam)
        worst = max(worst, float(np.sum(np.abs(np.diff(fit.curve.values, order + 1)))))
    passed = worst <= 1e-6
    detail = f"largest ||D p||_1 at lambda_max over 10 instances {worst:.2e} (need <= 1e-6)"
    record_criterion(5, passed, detail)
    assert passed, detail


# 6 --------------------------------------------------------------------------------------


def _moment_z(draws, mean, var):
    n = draws.shape[0]
    m = draws.mean(axis=0)
    v = draws.var(axis=0, ddof=1)
    m4 = np.mean((draws - m) ** 4, axis=0)
    return (np.max(np.abs(m - mean) / np.sqrt(v / n)),
            np.max(np.abs(v - var) / np.sqrt((m4 - v ** 2) / n)))


def test_model_layer_checks():
    d0 = date(2021, 3, 1)
    X = CountSeries(d0, [400, 300, 500, 450, 350, 420, 380, 460])
    delay = DelayDistribution([0.4, 0.35, 0.25])
    p = SeverityCurve(d0, [0.5, 0.6, 0.55, 0.45, 0.5, 0.6, 0.4, 0.3])
    mom = expected_secondary(X, delay, p)
    beta = 2.0

    pb = np.stack([sample_poisson_binomial(X, delay, p, s).values for s in range(DRAWS)])
    bb = np.stack([sample_beta_binomial(X, delay, p, beta, s).values for s in range(DRAWS)])
    pb_mean_z, pb_var_z = _moment_z(pb, mom.mean, mom.var)
    bb_mean_z, bb_var_z = _moment_z(bb, mom.mean, beta * mom.var)
    moments_ok = max(pb_mean_z, pb_var_z, bb_mean_z, bb_var_z) < 3

    corr_ok = True
    worst_corr = 0.0
    for t in range(pb.shape[1] - 1):
        r = np.corrcoef(pb[:, t], pb[:, t + 1])[0, 1]
        se = (1 - r ** 2) / np.sqrt(DRAWS)
        lower = min(correlation_bound(delay, p, t + delay.d),
                    correlation_bound(delay, p, t + 1 + delay.d))
        corr_ok &= lower - 3 * se <= r <= 3 * se
        worst_corr = min(worst_corr, r)

    nat_delay, rate, _ = national_preset()
    flat = SeverityCurve(d0, np.full(nat_delay.d + 1, rate))
    tv = poisson_tv_bound(nat_delay, flat, nat_delay.d)
    nat_corr = correlation_bound(nat_delay, flat, nat_delay.d)
    tv_ok = 1e-6 <= tv < 1e-4

    passed = moments_ok and corr_ok and tv_ok
    detail = (f"max |z| mean/var: PB {pb_mean_z:.2f}/{pb_var_z:.2f}, BB {bb_mean_z:.2f}/"
              f"{bb_var_z:.2f} (need < 3); adjacent correlations in bound: {corr_ok} "
              f"(lowest {worst_corr:.4f}); national TV bound {tv:.2e} (need within [1e-6, 1e-4)) "
              f"with correlation bound {nat_corr:.4f}")
    record_criterion(6, passed, detail)
    assert moments_ok and corr_ok, detail
    assert tv_ok, detail


# 7 --------------------------------------------------------------------------------------


def _sweep_ok(results):
    lines, ok = [], True
    for offset, rows in sorted(results.items()):
        by = summary_by(rows, lambda r: r != ORACLE)
        deconv, conv, lagged = by["deconv-0"].mae, by["conv"].mae, by["lagged"].mae
        ok &= deconv < lagged
        if offset == 0:
            ok &= deconv < conv
        lines.append(f"{offset:+d}:{1e3 * deconv:.2f}/{1e3 * conv:.2f}/{1e3 * lagged:.2f}")
    return ok, " ".join(lines)


def test_misspecification_robustness(tmp_path):
    retro = run_misspec_sweep(ExperimentConfig(replicates=1), tmp_path / "retro")
    realtime = run_misspec_sweep(ExperimentConfig(setting=REALTIME, regions=("medium",),
                                                  replicates=1), tmp_path / "realtime")
    retro_ok, retro_text = _sweep_ok(retro)
    rt_ok, rt_text = _sweep_ok(realtime)
    passed = retro_ok and rt_ok
    detail = (f"MAE x1e3 deconv/conv/lagged by offset; retrospective {retro_text}; "
              f"real-time {rt_text}")
    record_criterion(7, passed, detail)
    assert passed, detail


# 8 --------------------------------------------------------------------------------------


def test_cleaning_conservation():
    rng = np.random.default_rng(808)
    totals_ok = True
    for seed in range(200):
        vals = rng.poisson(rng.uniform(5, 80), 91).astype(np.int64)
        start = int(rng.integers(0, 80))
        vals[start:start + 6] = 0
        for t in rng.integers(20, 91, 2):
            vals[t] = -int(rng.integers(1, 15))
        total = int(vals.sum())
        no_neg = redistribute_negatives(vals, seed)
        totals_ok &= int(redistribute_dumps(vals, seed).sum()) == total
        totals_ok &= int(no_neg.sum()) == total and bool(np.all(no_neg >= 0))
        totals_ok &= int(deweekify(no_neg, seed).sum()) == total
        totals_ok &= int(clean_pipeline(vals, seed).sum()) == total

    weekly_ok = True
    for seed in range(200):
        weekly = rng.integers(0, 1000, int(rng.integers(1, 30)))
        daily = impute_daily(weekly, seed)
        weekly_ok &= np.array_equal(daily.reshape(-1, 7).sum(axis=1), weekly)

    dumps = np.zeros(7 * 26, dtype=np.int64)
    dumps[6::7] = rng.poisson(140, 26)
    before = weekly_spectral_mass(dumps)
    after = weekly_spectral_mass(deweekify(dumps, 1))
    reduction = 1 - after / before
    passed = totals_ok and weekly_ok and reduction >= 0.8
    detail = (f"totals preserved over 200 random series: {totals_ok}; weekly sums preserved "
              f"over 200 imputations: {weekly_ok}; period-7 spectral mass reduced by "
              f"{100 * reduction:.2f}% (need >= 80)")
    record_criterion(8, passed, detail)
    assert passed, detail


# 9 --------------------------------------------------------------------------------------


def test_byte_identical_reruns(tmp_path):
    outputs = []
    for name in ("first", "second"):
        config = ExperimentConfig(regions=("small", "medium"), replicates=2, lambda_count=8)
        run_experiment(config, tmp_path / name)
        outputs.append({p.relative_to(tmp_path / name): p.read_bytes()
                        for p in sorted((tmp_path / name).rglob("*")) if p.is_file()})
    same = outputs[0].keys() == outputs[1].keys() and all(
        outputs[0][k] == outputs[1][k] for k in outputs[0])
    csvs = sum(1 for k in outputs[0] if k.suffix == ".csv")
    detail = f"{len(outputs[0])} output files ({csvs} CSV) compared byte for byte: identical={same}"
    record_criterion(9, same, detail)
    assert same, detail
