from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from conftest import random_instance
from reference import reference_solve
from sevdeconv.core import (
    ConvolutionOperator,
    CountSeries,
    SeverityCurve,
    discretized_gamma,
    point_mass,
)
from sevdeconv.simulate import PRESETS, build_region, sample_poisson_binomial
from sevdeconv.solver import (
    DeconvProblem,
    DeconvSpec,
    VarianceError,
    build_problem,
    lambda_max_alternating,
    lambda_max_bound,
    lambda_max_exact,
    objective,
    solve,
    solve_gaussian,
    solve_realtime,
    solve_retrospective,
    with_lambda,
)
from sevdeconv.tune import cv_deconv, lambda_grid

D0 = date(2021, 1, 1)


def noiseless_problem(rate=0.1, n_y=60, d=6, loss="poisson", lam=1e-3, seed=0):
    """Exact expected counts (not rounded) from a constant rate."""
    rng = np.random.default_rng(seed)
    X = CountSeries(D0, rng.integers(200, 2000, n_y + d))
    delay = discretized_gamma(3, 2.7, d)
    A = ConvolutionOperator(X, delay, D0 + timedelta(days=d), n_y)
    y = A.matvec(np.full(n_y + d, rate))
    variance = y.copy() if loss == "gaussian" else None
    return DeconvProblem(A, y, DeconvSpec(loss, 0, lam), np.ones(n_y), variance)


# objective -----------------------------------------------------------------------


def test_objective_single_day_hand_value():
    val = objective([0.2], CountSeries(D0, [10]), CountSeries(D0, [2]), point_mass(0),
                    DeconvSpec())
    assert val == pytest.approx(2 - 2 * np.log(2))
    assert val == pytest.approx(0.6137, abs=1e-4)


def test_constant_shift_leaves_penalty_unchanged(rng):
    X, Y, delay = random_instance(rng, 15, 2)
    prob = build_problem(X, Y, delay, DeconvSpec("poisson", 0, 0.7))
    a, b = np.full(prob.n, 0.2), np.full(prob.n, 0.35)
    assert prob.penalty(a) == prob.penalty(b) == 0.0
    assert prob.objective(a) - prob.objective(b) == pytest.approx(prob.loss(a) - prob.loss(b))


def test_solution_beats_truth_on_training_data(rng):
    truth = np.clip(0.3 + 0.1 * np.sin(np.arange(42) / 3), 0, 1)
    X, Y, delay = random_instance(rng, 40, 2, rate=truth)
    fit = solve_retrospective(X, Y, delay, 1, 0.05)
    assert fit.objective <= objective(truth, X, Y, delay, DeconvSpec("poisson", 1, 0.05))


@given(st.integers(0, 10_000), st.integers(0, 2))
@settings(max_examples=25, deadline=None)
def test_solution_inside_box(seed, order):
    rng = np.random.default_rng(seed)
    X, Y, delay = random_instance(rng, 12, 2, rate=rng.uniform(0, 1, 14))
    fit = solve_retrospective(X, Y, delay, order, float(rng.choice([0.0, 0.1, 2.0])))
    assert np.all(fit.curve.values >= 0) and np.all(fit.curve.values <= 1)


def test_smooth_gradient_matches_finite_differences(rng):
    X, Y, delay = random_instance(rng, 30, 3)
    spec = DeconvSpec("poisson", 1, 0.0, 0.5, False)
    prob = build_problem(X, Y, delay, spec, T=Y.end)
    h = 1e-6

    def smooth(p):
        return prob.loss(p) + prob.quad(p)

    for _ in range(10):
        p = rng.uniform(0.1, 0.9, prob.n)
        g = prob.smooth_grad(p)
        fd = np.array([(smooth(p + h * e) - smooth(p - h * e)) / (2 * h)
                       for e in np.eye(prob.n)])
        assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)


# retrospective solver -----------------------------------------------------------------------


@pytest.mark.parametrize("loss", ["poisson", "gaussian"])
def test_noiseless_constant_rate_recovered(loss):
    prob = noiseless_problem(loss=loss)
    fit = solve(prob, polish=True)
    d = prob.A.d
    assert np.max(np.abs(fit.curve.values[d:-d] - 0.1)) <= 1e-3


def test_large_lambda_gives_constant_from_scalar_oracle(rng):
    X, Y, delay = random_instance(rng, 40, 3)
    lam = lambda_max_bound(X, Y, delay, 0)
    fit = solve_retrospective(X, Y, delay, 0, 1.01 * lam)
    assert fit.knots.size == 0
    prob = build_problem(X, Y, delay, DeconvSpec())
    a1, y = prob.A.row_sums(), prob.y

    def scalar_loss(c):
        return float(np.sum(c * a1 - y * np.log(c * a1)))

    grid = np.linspace(0.01, 1.0, 991)
    c0 = grid[np.argmin([scalar_loss(c) for c in grid])]
    c_star = minimize_scalar(scalar_loss, bracket=(c0 - 0.001, c0, c0 + 0.001),
                             method="golden", tol=1e-12).x
    assert np.max(np.abs(fit.curve.values - c_star)) <= 1e-4


def test_tiny_instance_matches_reference(rng):
    X, Y, delay = random_instance(rng, 7, 1)
    prob = build_problem(X, Y, delay, DeconvSpec("poisson", 1, 0.5))
    assert prob.n == 8
    fit = solve(prob, polish=True)
    _, ref = reference_solve(prob)
    assert abs(fit.objective - ref) <= 1e-5 * abs(ref)


@pytest.mark.parametrize("loss", ["poisson", "gaussian"])
def test_reference_agreement_with_tail_terms(loss):
    rng = np.random.default_rng(11)
    for order in (0, 1, 2):
        X, Y, delay = random_instance(rng, 9, 2)
        spec = DeconvSpec(loss, order, 0.2, 1.0, True)
        variance = np.maximum(Y.values, 1.0) if loss == "gaussian" else None
        prob = build_problem(X, Y, delay, spec, T=Y.end, variance=variance)
        fit = solve(prob, polish=True)
        _, ref = reference_solve(prob)
        assert abs(fit.objective - ref) <= 1e-5 * max(1.0, abs(ref))


def test_penalty_path_is_monotone(rng):
    truth = np.clip(0.25 + 0.15 * np.sin(np.arange(66) / 8), 0, 1)
    X, Y, delay = random_instance(rng, 60, 6, rate=truth)
    prob = build_problem(X, Y, delay, DeconvSpec("poisson", 1))
    lam_max = lambda_max_exact(prob)
    norms = []
    for lam in lam_max * np.logspace(-3, 0, 5):
        fit = solve(with_lambda(prob, lam), polish=True)
        norms.append(np.sum(np.abs(prob.D @ fit.curve.values)))
    assert all(a >= b - 1e-6 for a, b in zip(norms, norms[1:]))


# real-time solver -------------------------------------------------------------------------------


@pytest.mark.parametrize("order", [0, 1, 2])
def test_realtime_tail_constraint_holds(rng, order):
    X, Y, delay = random_instance(rng, 40, 4)
    fit = solve_realtime(X, Y, delay, order, 0.05, 1.0, Y.end)
    p = fit.curve.values
    assert abs(np.diff(p, order + 1)[-1]) <= 1e-8
    if order == 0:
        assert abs(p[-1] - p[-2]) <= 1e-8


def test_realtime_large_gamma_flattens_tail(rng):
    X, Y, delay = random_instance(rng, 40, 4)
    fit = solve_realtime(X, Y, delay, 1, 0.05, 1e6, Y.end)
    tail = fit.curve.values[-(delay.d + 2):]
    assert np.max(np.abs(np.diff(tail))) <= 1e-3


def test_realtime_without_extras_matches_retrospective(rng):
    X, Y, delay = random_instance(rng, 40, 4)
    rt = solve_realtime(X, Y, delay, 1, 0.1, 0.0, Y.end, tail_constraint=False)
    retro = solve_retrospective(X, Y, delay, 1, 0.1)
    assert abs(rt.objective - retro.objective) <= 1e-6 * max(1.0, abs(retro.objective))
    assert rt.estimate == pytest.approx(retro.curve.values[-1], abs=1e-5)


def test_realtime_ignores_data_after_T(rng):
    X, Y, delay = random_instance(rng, 50, 4)
    T = Y.origin + timedelta(days=35)
    short = CountSeries(Y.origin, Y.values[:36])
    a = solve_realtime(X, Y, delay, 0, 0.05, 1.0, T)
    b = solve_realtime(X, short, delay, 0, 0.05, 1.0, T)
    assert a.estimate == pytest.approx(b.estimate, abs=1e-9)


# Gaussian variant ---------------------------------------------------------------------------------


def test_gaussian_square_system_inverts_exactly():
    X = CountSeries(D0, [50, 80, 40, 120, 90])
    Y = CountSeries(D0, [10, 20, 5, 60, 30])
    fit = solve_gaussian(X, Y, point_mass(0), 0, 0.0, variance=np.ones(5))
    np.testing.assert_allclose(fit.curve.values, Y.values / X.values, atol=1e-8)


def test_gaussian_requires_positive_variance():
    X = CountSeries(D0, [50, 80, 40])
    with pytest.raises(VarianceError):
        solve_gaussian(X, CountSeries(D0, [1, 2, 3]), point_mass(0), 0, 0.0,
                       variance=np.array([1.0, 0.0, 1.0]))


def test_gaussian_mae_close_to_poisson():
    region = build_region(PRESETS["medium"], 3, (0,))
    n = 300
    start = 380
    X = CountSeries(region.X.origin + timedelta(days=start), region.X.values[start:start + n])
    p = SeverityCurve(X.origin, region.p.values[start:start + n])
    Y = sample_poisson_binomial(X, region.delay, p, 3, 1)
    d = region.delay.d
    truth = p.values[d:-d]
    maes = {}
    for loss in ("poisson", "gaussian"):
        prob = build_problem(X, Y, region.delay, DeconvSpec(loss, 0))
        curve = cv_deconv(prob, lambda_grid(lambda_max_exact(prob), 12), 5)
        fit = solve(with_lambda(prob, curve.selected("min")), polish=True)
        maes[loss] = np.mean(np.abs(fit.curve.values[d:-d] - truth))
    assert maes["gaussian"] <= 1.25 * maes["poisson"]


# lambda_max -------------------------------------------------------------------------------------


@pytest.mark.parametrize("order", [0, 1])
def test_solution_at_lambda_max_has_no_knots(rng, order):
    X, Y, delay = random_instance(rng, 30, 3)
    lam = lambda_max_bound(X, Y, delay, order)
    fit = solve_retrospective(X, Y, delay, order, lam)
    assert np.sum(np.abs(np.diff(fit.curve.values, order + 1))) <= 1e-6


def test_alternating_bound_history_nonincreasing(rng):
    X, Y, delay = random_instance(rng, 30, 3)
    prob = build_problem(X, Y, delay, DeconvSpec("poisson", 1))
    _, history = lambda_max_alternating(prob, 100)
    assert np.all(np.diff(history) <= 0)


def test_lambda_max_near_bisection_on_toy():
    rng = np.random.default_rng(5)
    X, Y, delay = random_instance(rng, 5, 1)
    prob = build_problem(X, Y, delay, DeconvSpec())
    assert prob.n == 6
    lam = lambda_max_exact(prob)

    def flat(l):
        return np.sum(np.abs(np.diff(solve(with_lambda(prob, l), polish=True).curve.values))) <= 1e-6

    lo, hi = 0.0, 10 * lam + 1.0
    assert flat(hi)
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if flat(mid) else (mid, hi)
    assert abs(lam - hi) <= 0.1 * hi
