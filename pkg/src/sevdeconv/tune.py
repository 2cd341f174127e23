"""Hyperparameter selection by cross- and forward-validation, and MAE summaries."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from datetime import date, timedelta

import numpy as np

from .core import (
    ConvolutionOperator,
    CountSeries,
    DelayDistribution,
    ParameterError,
    day_offset,
    point_mass,
)
from .ratios import (
    CENTERED,
    TRAILING,
    SmoothingMode,
    conv_ratio_realtime,
    conv_ratio_retrospective,
    default_lag,
    lagged_ratio,
)
from .solver import (
    DeconvProblem,
    DeconvSpec,
    FitResult,
    build_problem,
    lambda_max_exact,
    solve,
)

log = logging.getLogger(__name__)

MIN_RULE = "min"
ONE_SE_RULE = "1se"
RULES = (MIN_RULE, ONE_SE_RULE)
N_LAMBDA = 20
LAMBDA_RATIO = 1e-4
GAMMA_GRID = tuple(np.logspace(-2, 4, 10))
WINDOW_GRID = (1, 7, 14, 21, 28)
DEFAULT_K = 5
DEFAULT_M = 28
# validation fits only feed a reconvolution error, so a looser gap suffices
VALIDATION_TOL = 1e-7


class TuningError(RuntimeError):
    """Every candidate on the grid failed."""


@dataclass(frozen=True)
class Grid:
    values: tuple

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ParameterError("grid is empty")
        if any(v < 0 for v in vals) or any(b <= a for a, b in zip(vals, vals[1:])):
            raise ParameterError("grid must be nonnegative and strictly increasing")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def __getitem__(self, i):
        return self.values[i]


@dataclass
class ValidationCurve:
    values: tuple
    errors: np.ndarray
    se: np.ndarray
    fold_errors: np.ndarray

    @property
    def index_min(self) -> int:
        return select_index(self.errors, self.se, MIN_RULE)

    @property
    def index_1se(self) -> int:
        return select_index(self.errors, self.se, ONE_SE_RULE)

    def index(self, rule: str) -> int:
        return select_index(self.errors, self.se, rule)

    def selected(self, rule: str) -> float:
        return self.values[self.index(rule)]

    def best_error(self, rule: str = MIN_RULE) -> float:
        return float(self.errors[self.index(rule)])


def select_index(errors, se, rule: str) -> int:
    """Grid index chosen by the min or one-standard-error rule.

    Ties under the min rule go to the larger hyperparameter.  The 1se rule
    picks the largest candidate whose error is within one SE of the minimum.
    NaN errors mark failed candidates and are never selected.
    """
    errors = np.asarray(errors, float)
    se = np.asarray(se, float)
    ok = np.isfinite(errors)
    if not ok.any():
        raise TuningError("every candidate failed")
    best = float(np.min(errors[ok]))
    i_min = int(np.flatnonzero(ok & (errors == best))[-1])
    if rule == MIN_RULE:
        return i_min
    if rule != ONE_SE_RULE:
        raise ParameterError(f"unknown rule {rule!r}")
    pad = se[i_min] if np.isfinite(se[i_min]) else 0.0
    return int(np.flatnonzero(ok & (errors <= best + pad))[-1])


def cv_folds(n: int, K: int) -> list[np.ndarray]:
    """Fold ``j`` holds the indices ``i`` with ``i % K == j``."""
    if K < 2:
        raise ParameterError("need at least two folds")
    if n < 2 * K:
        raise ParameterError(f"{n} time points are too few for {K} folds")
    idx = np.arange(n)
    return [idx[idx % K == j] for j in range(K)]


def lambda_grid(lam_max: float, n: int = N_LAMBDA, ratio: float = LAMBDA_RATIO) -> Grid:
    """Log-spaced grid ending at ``lam_max``.

    A zero ``lam_max`` means the full-data fit has no knots at any ``lam``;
    the grid then ends at 1 so held-out folds are still regularized.
    """
    if lam_max <= 0:
        lam_max = 1.0
    return Grid(tuple(np.logspace(np.log10(lam_max * ratio), np.log10(lam_max), n)))


def _curve(values, fold_errors: np.ndarray) -> ValidationCurve:
    errors = fold_errors.mean(axis=0)
    k = fold_errors.shape[0]
    se = fold_errors.std(axis=0, ddof=1) / np.sqrt(k) if k > 1 else np.full(errors.shape, np.nan)
    return ValidationCurve(tuple(values), errors, se, fold_errors)


def _with(prob: DeconvProblem, weights=None, **spec_kw) -> DeconvProblem:
    spec = replace(prob.spec, **spec_kw)
    w = prob.weights if weights is None else weights
    return DeconvProblem(prob.A, prob.y, spec, w, prob.variance, prob.tail, prob.p_origin)


def _safe_solve(prob: DeconvProblem) -> FitResult | None:
    try:
        return solve(prob, tol=VALIDATION_TOL, polish=False)
    except (ArithmeticError, ValueError) as err:
        log.warning("validation fit failed at lam=%g gamma=%g: %s", prob.spec.lam,
                    prob.spec.gamma, err)
        return None


# ---------------------------------------------------------------------------
# deconvolution


def cv_deconv(prob: DeconvProblem, grid: Grid, K: int = DEFAULT_K) -> ValidationCurve:
    """K-fold validation of ``lam`` with held-out counts predicted by reconvolution."""
    folds = cv_folds(prob.A.n_y, K)
    out = np.full((K, len(grid)), np.nan)
    for j, fold in enumerate(folds):
        weights = prob.weights.copy()
        weights[fold] = 0.0
        for g, lam in enumerate(grid):
            fit = _safe_solve(_with(prob, weights, lam=lam))
            if fit is None:
                continue
            pred = prob.A.matvec(fit.curve.values)
            out[j, g] = np.mean(np.abs(pred[fold] - prob.y[fold]))
    if np.all(np.isnan(out)):
        raise TuningError("all cross-validation fits failed")
    # a candidate with any failed fold has a NaN mean and counts as failed
    return _curve(grid.values, out)


def cv_tune(X: CountSeries, Y: CountSeries, delay: DelayDistribution, method: "Method",
            grid: Grid | None = None, K: int = DEFAULT_K, rule: str = MIN_RULE,
            lag: int | None = None):
    """Retrospective K-fold tuning for any method.

    Returns ``(selected value, ValidationCurve)``: ``lam`` for deconvolution,
    the smoothing window for the ratio estimators.
    """
    if method.kind == "deconv":
        prob = build_problem(X, Y, delay, DeconvSpec("poisson", method.order))
        if grid is None:
            grid = lambda_grid(lambda_max_exact(prob))
        curve = cv_deconv(prob, grid, K)
    else:
        grid = grid or Grid(WINDOW_GRID)
        curve = cv_ratio(X, Y, delay, method, grid, K, lag)
    return curve.selected(rule), curve


def tune_order(curves: dict[int, ValidationCurve], rule: str = MIN_RULE) -> int:
    """Order with the lowest selected validation error; ties go to the smaller order."""
    if not curves:
        raise ParameterError("no orders supplied")
    orders = sorted(curves)
    errs = [curves[m].best_error(rule) for m in orders]
    return orders[int(np.argmin(errs))]


def realtime_problem(X, Y, delay, order, T, window, lam=0.0, gamma=0.0) -> DeconvProblem:
    spec = DeconvSpec("poisson", order, lam, gamma, tail_constraint=True)
    return build_problem(X, Y, delay, spec, T=T, window=window)


def _extrapolated_prediction(X: CountSeries, delay: DelayDistribution, curve_origin: date,
                             rates: np.ndarray, s: date) -> float:
    """Predict ``Y_{s+1}`` from rates through ``s`` plus a linear extrapolation to ``s+1``."""
    nxt = float(np.clip(2 * rates[-1] - rates[-2], 0.0, 1.0))
    ext = np.append(rates, nxt)
    A = ConvolutionOperator(X, delay, s + timedelta(days=1), 1)
    lo = day_offset(curve_origin, A.p_origin)
    return float(A.matvec(ext[lo:])[0])


def forward_validate_gamma(X: CountSeries, Y: CountSeries, delay: DelayDistribution, order: int,
                           lam: float, grid: Grid, T: date, M: int = DEFAULT_M,
                           window: int | None = None) -> ValidationCurve:
    """Rolling one-step-ahead validation of the tail penalty ``gamma``.

    For ``s = T-M .. T-1`` the real-time problem is solved with data through
    ``s``; ``p_{s+1}`` is extrapolated linearly from ``p_s`` and ``p_{s-1}`` and
    ``Y_{s+1}`` is predicted by reconvolution.
    """
    if M < 1:
        raise ParameterError("need at least one forward-validation step")
    steps = [T - timedelta(days=M - i) for i in range(M)]
    if day_offset(Y.origin, steps[0]) < delay.d + 5 or day_offset(Y.origin, T) >= len(Y):
        raise ParameterError("insufficient history for forward validation")
    out = np.full((M, len(grid)), np.nan)
    for i, s in enumerate(steps):
        y_next = float(Y.values[day_offset(Y.origin, s) + 1])
        # built with a positive gamma so the tail weights are attached
        base = realtime_problem(X, Y, delay, order, s, window, lam, gamma=1.0)
        for g, gamma in enumerate(grid):
            fit = _safe_solve(_with(base, gamma=gamma))
            if fit is None:
                continue
            pred = _extrapolated_prediction(X, delay, fit.curve.origin, fit.curve.values, s)
            out[i, g] = abs(pred - y_next)
    if np.all(np.isnan(out)):
        raise TuningError("all forward-validation fits failed")
    return _curve(grid.values, out)


@dataclass(frozen=True)
class RealtimeTuning:
    lam: float
    gamma: float
    lam_curve: ValidationCurve
    gamma_curve: ValidationCurve


def tune_realtime(X: CountSeries, Y: CountSeries, delay: DelayDistribution, order: int, T: date,
                  *, window: int | None = None, K: int = DEFAULT_K, M: int = DEFAULT_M,
                  lam_rule: str = MIN_RULE, gamma_rule: str = MIN_RULE,
                  lam_grid: Grid | None = None, gamma_grid: Grid | None = None) -> RealtimeTuning:
    """Two-stage selection: ``lam`` by K-fold CV with ``gamma = 0``, then ``gamma`` forward."""
    base = realtime_problem(X, Y, delay, order, T, window)
    lam_curve = _realtime_lam_curve(base, K, lam_grid)
    lam = lam_curve.selected(lam_rule)
    gamma_grid = gamma_grid or Grid(GAMMA_GRID)
    gamma_curve = forward_validate_gamma(X, Y, delay, order, lam, gamma_grid, T, M, window)
    return RealtimeTuning(lam, gamma_curve.selected(gamma_rule), lam_curve, gamma_curve)


def _realtime_lam_curve(base: DeconvProblem, K: int, lam_grid: Grid | None) -> ValidationCurve:
    if lam_grid is None:
        lam_grid = lambda_grid(lambda_max_exact(_with(base, tail_constraint=False)))
    return cv_deconv(base, lam_grid, K)


def tune_realtime_rules(X: CountSeries, Y: CountSeries, delay: DelayDistribution, order: int,
                        T: date, rules=RULES, *, window: int | None = None, K: int = DEFAULT_K,
                        M: int = DEFAULT_M, lam_grid: Grid | None = None,
                        gamma_grid: Grid | None = None) -> dict[str, RealtimeTuning]:
    """:func:`tune_realtime` for several rules at once, sharing the ``lam`` stage.

    Each rule is applied to both stages.  Rules that pick the same ``lam``
    share one forward-validation pass.
    """
    base = realtime_problem(X, Y, delay, order, T, window)
    lam_curve = _realtime_lam_curve(base, K, lam_grid)
    gamma_grid = gamma_grid or Grid(GAMMA_GRID)
    gamma_curves: dict[float, ValidationCurve] = {}
    out = {}
    for rule in rules:
        lam = lam_curve.selected(rule)
        if lam not in gamma_curves:
            gamma_curves[lam] = forward_validate_gamma(X, Y, delay, order, lam, gamma_grid, T,
                                                       M, window)
        curve = gamma_curves[lam]
        out[rule] = RealtimeTuning(lam, curve.selected(rule), lam_curve, curve)
    return out


# ---------------------------------------------------------------------------
# ratio estimators


@dataclass(frozen=True)
class Method:
    """An estimator: ``deconv`` (with trend-filtering order), ``lagged`` or ``conv``."""

    kind: str
    order: int = 0

    def __post_init__(self):
        if self.kind not in ("deconv", "lagged", "conv"):
            raise ParameterError(f"unknown method {self.kind!r}")

    @property
    def name(self) -> str:
        return f"deconv-{self.order}" if self.kind == "deconv" else self.kind

    @classmethod
    def parse(cls, name: str) -> "Method":
        name = name.strip().lower()
        if name.startswith("deconv"):
            _, _, order = name.partition("-")
            return cls("deconv", int(order or 0))
        return cls(name)


def ratio_estimate(X: CountSeries, Y: CountSeries, delay: DelayDistribution, method: Method,
                   window: int, realtime: bool, lag: int | None = None):
    """Ratio estimates on the primary axis for the given method and setting."""
    lag = default_lag(delay) if lag is None else lag
    if method.kind == "lagged":
        mode = SmoothingMode(window, TRAILING if realtime else CENTERED)
        return lagged_ratio(X, Y, lag, mode)
    if realtime:
        return conv_ratio_realtime(X, Y, delay, window)
    return conv_ratio_retrospective(X, Y, delay, window)


def _fill_edges(values: np.ndarray) -> np.ndarray:
    """Carry the nearest defined value into NaN entries."""
    ok = np.flatnonzero(~np.isnan(values))
    if ok.size == 0:
        return values
    idx = np.arange(values.size)
    return np.interp(idx, ok, values[ok])


def _prediction_model(delay: DelayDistribution, method: Method, lag: int) -> DelayDistribution:
    # the lagged ratio's implied model puts all delay mass at the lag
    return point_mass(lag, max(lag, delay.d)) if method.kind == "lagged" else delay


def cv_ratio(X: CountSeries, Y: CountSeries, delay: DelayDistribution, method: Method,
             grid: Grid, K: int = DEFAULT_K, lag: int | None = None) -> ValidationCurve:
    """K-fold validation of the smoothing window of a retrospective ratio.

    Held-out secondary counts are replaced by linear interpolation of the
    training counts, the estimator is recomputed, and held-out counts are
    predicted from the estimated rates with the method's own model.
    """
    lag = default_lag(delay) if lag is None else lag
    model = _prediction_model(delay, method, lag)
    folds = cv_folds(len(Y), K)
    A = ConvolutionOperator(X, model, Y.origin, len(Y))
    lo = day_offset(X.origin, A.p_origin)
    y = Y.values.astype(float)
    out = np.full((K, len(grid)), np.nan)
    for j, fold in enumerate(folds):
        train = np.setdiff1d(np.arange(len(Y)), fold)
        filled = y.copy()
        filled[fold] = np.interp(fold, train, y[train])
        Yf = CountSeries(Y.origin, np.rint(filled).astype(np.int64))
        for g, w in enumerate(grid):
            est = ratio_estimate(X, Yf, delay, method, int(w), realtime=False, lag=lag)
            rates = _fill_edges(np.asarray(est.values, float))
            if np.all(np.isnan(rates)):
                continue
            pred = A.matvec(rates[lo:lo + A.n_p])
            out[j, g] = np.mean(np.abs(pred[fold] - y[fold]))
    if np.all(np.isnan(out)):
        raise TuningError("all ratio validation candidates failed")
    return _curve(grid.values, out)


def forward_validate_ratio(X: CountSeries, Y: CountSeries, delay: DelayDistribution,
                           method: Method, grid: Grid, T: date, M: int = DEFAULT_M,
                           lag: int | None = None) -> ValidationCurve:
    """Rolling one-step-ahead validation of a real-time ratio's smoothing window.

    Real-time ratio estimates through ``s`` use only data through ``s``, so each
    window's estimates are computed once on data through ``T - 1``.
    """
    lag = default_lag(delay) if lag is None else lag
    model = _prediction_model(delay, method, lag)
    steps = [T - timedelta(days=M - i) for i in range(M)]
    cut = day_offset(Y.origin, T)
    if cut < 1 or cut >= len(Y):
        raise ParameterError("forward-validation target outside the secondary series")
    Y_past = CountSeries(Y.origin, Y.values[:cut])
    out = np.full((M, len(grid)), np.nan)
    for g, w in enumerate(grid):
        est = ratio_estimate(X, Y_past, delay, method, int(w), realtime=True, lag=lag)
        rates = np.asarray(est.values, float)
        for i, s in enumerate(steps):
            j = day_offset(X.origin, s)
            hist = rates[: j + 1]
            if j < 1 or np.isnan(hist[-1]) or np.isnan(hist[-2]):
                continue
            hist = _fill_edges(hist)
            pred = _extrapolated_prediction(X, model, X.origin, hist, s)
            out[i, g] = abs(pred - float(Y.values[day_offset(Y.origin, s) + 1]))
    if np.all(np.isnan(out)):
        raise TuningError("all ratio forward-validation candidates failed")
    return _curve(grid.values, _nan_mean_rows(out))


def _nan_mean_rows(out: np.ndarray) -> np.ndarray:
    # steps with no estimate (early history) drop out of every candidate alike
    keep = ~np.any(np.isnan(out), axis=1)
    return out[keep] if keep.any() else out


# ---------------------------------------------------------------------------
# reporting


@dataclass(frozen=True)
class SummaryRow:
    method: str
    mae: float
    se: float | None
    improvement: dict


def cell_mae(estimates, truth) -> float:
    """Mean absolute error over evaluation times, ignoring missing estimates."""
    est = np.asarray(estimates, float)
    tru = np.asarray(truth, float)
    if est.shape != tru.shape:
        raise ParameterError(f"estimate shape {est.shape} does not match truth {tru.shape}")
    ok = ~np.isnan(est)
    return float(np.mean(np.abs(est[ok] - tru[ok]))) if ok.any() else float("nan")


def aggregate(mae: np.ndarray) -> tuple[float, float | None]:
    """Mean and SE of an (R regions x I replicates) MAE matrix.

    ``mean = (1/R) sum_r mean_i MAE_ri`` and
    ``SE = sqrt((1/R^2) sum_r var_i(MAE_ri) / I)``; SE is absent when I = 1.
    """
    mae = np.atleast_2d(np.asarray(mae, float))
    R, I = mae.shape
    mean = float(np.mean(mae.mean(axis=1)))
    if I < 2:
        return mean, None
    se = float(np.sqrt(np.sum(mae.var(axis=1, ddof=1) / I) / R ** 2))
    return mean, se


def mae_report(estimates: dict, truth, baselines=("conv", "lagged")) -> list[SummaryRow]:
    """Summary rows from per-method estimate arrays shaped (R, I, n_eval).

    ``truth`` is (R, n_eval) or (R, I, n_eval).  Improvement is the percentage
    reduction of the aggregated MAE relative to each baseline present.
    """
    truth = np.asarray(truth, float)
    maes = {}
    for name, est in estimates.items():
        est = np.asarray(est, float)
        if est.ndim != 3:
            raise ParameterError(f"{name}: estimates must be (regions, replicates, times)")
        if truth.ndim == 3:
            tru = truth
        elif truth.ndim == 2 and (truth.shape[0], truth.shape[1]) == (est.shape[0], est.shape[2]):
            tru = np.broadcast_to(truth[:, None, :], est.shape)
        else:
            tru = truth
        if tru.shape != est.shape:
            raise ParameterError(f"{name}: shape {est.shape} does not match truth {tru.shape}")
        cells = np.array([[cell_mae(est[r, i], tru[r, i]) for i in range(est.shape[1])]
                          for r in range(est.shape[0])])
        maes[name] = aggregate(cells)
    rows = []
    for name, (mean, se) in maes.items():
        imp = {b: 100.0 * (maes[b][0] - mean) / maes[b][0] for b in baselines
               if b in maes and b != name and maes[b][0] > 0}
        rows.append(SummaryRow(name, mean, se, imp))
    return rows
