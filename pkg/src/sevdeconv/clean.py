"""Cleaning of reported secondary counts and weekly-to-daily imputation.

Each operation accepts a :class:`CountSeries` or a plain integer array and
returns the same kind of object.  Raw reports may contain negative values, so
array input is the natural entry point for :func:`redistribute_negatives`.
"""

from __future__ import annotations

from datetime import date

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import CountSeries, ParameterError
from .simulate import make_rng
from .smoothing import gcv_penalty, penalized_fit

DUMP_RUN = 6
WEEK = 7
OUTLIER_WINDOW = 15
IQR_MULT = 3.0
MAX_TRUNCATION_PASSES = 50


class InfeasibleError(ValueError):
    """A negative report exceeds the counts available to absorb it."""


def _unwrap(Y) -> tuple[date | None, np.ndarray]:
    if isinstance(Y, CountSeries):
        return Y.origin, Y.values.astype(np.int64)
    vals = np.asarray(Y)
    if vals.ndim != 1:
        raise ParameterError("counts must be one-dimensional")
    if vals.size and not np.all(np.equal(np.mod(vals, 1), 0)):
        raise ParameterError("counts must be integers")
    return None, vals.astype(np.int64)


def _wrap(origin: date | None, values: np.ndarray):
    return CountSeries(origin, values) if origin is not None else values


def redistribute_dumps(Y, seed=0, *key):
    """Spread each data dump uniformly over the week that ends on it.

    A dump is a nonzero count preceded by six zero days.  Its value is
    reallocated over those seven days with a uniform multinomial draw.
    """
    origin, vals = _unwrap(Y)
    rng = make_rng(seed, *key)
    out = vals.copy()
    for t in range(DUMP_RUN, vals.size):
        if vals[t] > 0 and not np.any(vals[t - DUMP_RUN:t]):
            out[t - DUMP_RUN:t + 1] = rng.multinomial(vals[t], np.full(WEEK, 1.0 / WEEK))
    return _wrap(origin, out)


def redistribute_negatives(Y, seed=0, *key):
    """Remove negative reports by subtracting them from the preceding history.

    The magnitude is allocated over the earlier days by a uniform multinomial
    draw.  Draws that exceed a day's count are re-allocated uniformly among
    the days that still have counts, so the result stays nonnegative.
    """
    origin, vals = _unwrap(Y)
    rng = make_rng(seed, *key)
    out = vals.copy()
    for t in np.flatnonzero(vals < 0):
        owed = int(-out[t])
        out[t] = 0
        history = out[:t]
        if history.sum() < owed:
            raise InfeasibleError(
                f"negative count {-owed} at index {t} exceeds the preceding total {history.sum()}")
        while owed > 0:
            live = np.flatnonzero(history > 0)
            take = np.minimum(rng.multinomial(owed, np.full(live.size, 1.0 / live.size)),
                              history[live])
            history[live] -= take
            owed -= int(take.sum())
    return _wrap(origin, out)


def _band(values: np.ndarray, window: int, iqr_mult: float) -> tuple[np.ndarray, np.ndarray]:
    half = window // 2
    pad = np.full(half, np.nan)
    windows = sliding_window_view(np.concatenate((pad, values, pad)), window)
    median = np.nanmedian(windows, axis=1)
    resid = np.concatenate((pad, values - median, pad))
    rwin = sliding_window_view(resid, window)
    q1, q3 = np.nanpercentile(rwin, [25, 75], axis=1)
    spread = iqr_mult * (q3 - q1)
    return median - spread, median + spread


def outlier_truncate(Y, window: int = OUTLIER_WINDOW, iqr_mult: float = IQR_MULT):
    """Pull values outside a local median band back to the band edge.

    The band at ``t`` is the centered-window median plus or minus ``iqr_mult``
    times the interquartile range of the residuals in that window (windows
    shrink at the ends).  Truncation is repeated until nothing moves, so the
    operation is idempotent.  Integer input is rounded back to integers;
    float arrays are returned as floats.
    """
    if window < 3 or window % 2 == 0:
        raise ParameterError(f"outlier window must be odd and at least 3, got {window}")
    if iqr_mult < 0:
        raise ParameterError("IQR multiplier must be nonnegative")
    if isinstance(Y, CountSeries):
        origin, vals = Y.origin, Y.values.astype(float)
    else:
        origin, vals = None, np.asarray(Y, dtype=float)
    integer = origin is not None or np.issubdtype(np.asarray(Y).dtype, np.integer)
    out = vals.copy()
    for _ in range(MAX_TRUNCATION_PASSES):
        lo, hi = _band(out, window, iqr_mult)
        new = np.clip(out, lo, hi)
        if integer:
            new = np.rint(new)
        if np.array_equal(new, out):
            break
        out = new
    if integer:
        return _wrap(origin, out.astype(np.int64))
    return out


def trailing_mean(values, width: int = WEEK) -> np.ndarray:
    """Trailing mean over ``width`` days; the first days average what exists."""
    vals = np.asarray(values, dtype=float)
    csum = np.concatenate(([0.0], np.cumsum(vals)))
    idx = np.arange(vals.size)
    lo = np.maximum(idx - width + 1, 0)
    return (csum[idx + 1] - csum[lo]) / (idx + 1 - lo)


def sum_preserving_round(values, rng) -> np.ndarray:
    """Stochastic rounding whose total equals the (integer) sum of ``values``.

    Each entry is its floor plus a Bernoulli draw with the fractional part as
    success probability; the draws are coupled by systematic sampling so the
    number of round-ups is fixed.
    """
    vals = np.asarray(values, dtype=float)
    base = np.floor(vals)
    frac = vals - base
    cum = np.concatenate(([0.0], np.cumsum(frac)))
    u = rng.uniform()
    ups = np.diff(np.floor(cum + u))
    return (base + ups).astype(np.int64)


def weekly_calibrated_mean(averaged, daily) -> np.ndarray:
    """Smooth mean curve of ``averaged`` with smoothness chosen on weekly means.

    Trailing averages have strongly correlated noise, which drives
    cross-validation toward interpolation.  Weekly means of ``daily`` have
    nearly independent noise and no day-of-week pattern, so the penalty is
    chosen by GCV there and carried to the daily grid by the step-size
    scaling of the second-difference penalty (a factor ``7**4``).  With fewer
    than five full weeks the fit is a straight line.
    """
    daily = np.asarray(daily, dtype=float)
    weeks = daily.size // WEEK
    if weeks < 5:
        lam_week = 1e8
    else:
        lam_week = gcv_penalty(daily[daily.size - weeks * WEEK:].reshape(weeks, WEEK).mean(axis=1))
    return penalized_fit(averaged, lam_week * WEEK ** 4)


def deweekify(Y, seed=0, *key, window: int = OUTLIER_WINDOW, iqr_mult: float = IQR_MULT):
    """Remove day-of-week reporting effects while keeping daily variability.

    Steps: 7-day trailing mean, outlier truncation, penalized smooth mean
    curve (:func:`weekly_calibrated_mean`), residuals of the averaged data scaled by ``sqrt(7)`` added back to
    the mean curve, floor at zero.  The result is rescaled to the input total
    and rounded stochastically so the total is preserved exactly.
    """
    origin, vals = _unwrap(Y)
    if vals.size < 4 * WEEK:
        raise ParameterError(f"need at least {4 * WEEK} days, got {vals.size}")
    if np.any(vals < 0):
        raise ParameterError("redistribute negative counts before deweekifying")
    rng = make_rng(seed, *key)
    total = int(vals.sum())
    averaged = outlier_truncate(trailing_mean(vals), window, iqr_mult)
    mean = weekly_calibrated_mean(averaged, vals)
    raw = np.maximum(mean + np.sqrt(WEEK) * (averaged - mean), 0.0)
    mass = raw.sum()
    if mass <= 0:
        return _wrap(origin, np.zeros_like(vals))
    return _wrap(origin, sum_preserving_round(raw * (total / mass), rng))


def impute_daily(weekly_totals, seed=0, *key, origin: date | None = None):
    """Expand weekly totals to days with a uniform multinomial per week."""
    weekly = np.asarray(weekly_totals)
    if weekly.ndim != 1:
        raise ParameterError("weekly totals must be one-dimensional")
    if weekly.size and (np.any(weekly < 0) or not np.all(np.equal(np.mod(weekly, 1), 0))):
        raise ParameterError("weekly totals must be nonnegative integers")
    rng = make_rng(seed, *key)
    probs = np.full(WEEK, 1.0 / WEEK)
    daily = np.concatenate([rng.multinomial(int(w), probs) for w in weekly]) if weekly.size \
        else np.zeros(0, np.int64)
    return _wrap(origin, daily.astype(np.int64))


def weekly_spectral_mass(values) -> float:
    """Power of the demeaned series at the weekly frequency and its harmonics."""
    vals = np.asarray(values, dtype=float)
    n = vals.size - vals.size % WEEK
    spec = np.abs(np.fft.rfft(vals[:n] - vals[:n].mean())) ** 2
    step = n // WEEK
    return float(sum(spec[k * step] for k in range(1, WEEK // 2 + 1)))


def clean_pipeline(Y, seed=0, *key, window: int = OUTLIER_WINDOW, iqr_mult: float = IQR_MULT):
    """Dump and negative redistribution followed by :func:`deweekify`."""
    origin, vals = _unwrap(Y)
    vals = redistribute_dumps(vals, seed, *key, 0)
    vals = redistribute_negatives(vals, seed, *key, 1)
    return _wrap(origin, deweekify(vals, seed, *key, 2, window=window, iqr_mult=iqr_mult))
