"""Lagged and convolutional ratio estimators of the severity rate.

All estimators return a curve on the primary series' axis.  Entries whose
smoothing window or delay history is not covered by the data, or whose
denominator vanishes, are NaN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import CountSeries, DelayDistribution, ParameterError, SeverityCurve, day_offset

TRAILING = "trailing"
CENTERED = "centered"


@dataclass(frozen=True)
class SmoothingMode:
    window: int = 1
    alignment: str = TRAILING

    def __post_init__(self):
        if int(self.window) != self.window or self.window < 1:
            raise ParameterError(f"smoothing window must be a positive integer, got {self.window}")
        if self.alignment not in (TRAILING, CENTERED):
            raise ParameterError(f"unknown alignment {self.alignment!r}")

    @property
    def realtime(self) -> bool:
        return self.alignment == TRAILING


@dataclass(frozen=True)
class RatioEstimate:
    """Clipped rate estimates with a per-day flag marking the clipped entries."""

    curve: SeverityCurve
    clipped: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return self.curve.values

    @property
    def clipped_fraction(self) -> float:
        finite = ~np.isnan(self.curve.values)
        return float(self.clipped[finite].mean()) if finite.any() else 0.0


def _rolling_mean(values: np.ndarray, before: int, after: int) -> np.ndarray:
    """Mean over ``t - before .. t + after``; NaN where the window leaves the data."""
    n = values.size
    width = before + after + 1
    padded = np.concatenate((np.full(before, np.nan), values.astype(float), np.full(after, np.nan)))
    if n == 0:
        return padded[:0]
    return sliding_window_view(padded, width).mean(axis=1)


def smooth_values(values, mode: SmoothingMode) -> np.ndarray:
    w = mode.window
    if mode.alignment == TRAILING:
        return _rolling_mean(np.asarray(values), w - 1, 0)
    return _rolling_mean(np.asarray(values), w // 2, (w + 1) // 2 - 1)


def smooth(series: CountSeries, mode: SmoothingMode) -> np.ndarray:
    """Moving average of ``series`` aligned to its own axis.

    Trailing: mean of ``t-W+1 .. t``.  Centered: mean of
    ``t - floor(W/2) .. t + ceil(W/2) - 1``.  Days whose window is not fully
    inside the series are NaN.
    """
    return smooth_values(series.values, mode)


def _on_axis(series: CountSeries, origin, n: int) -> np.ndarray:
    """Values of ``series`` on the axis ``origin .. origin + n - 1`` with NaN outside."""
    out = np.full(n, np.nan)
    lo = day_offset(origin, series.origin)
    src_lo = max(0, -lo)
    dst_lo = max(0, lo)
    count = min(len(series) - src_lo, n - dst_lo)
    if count > 0:
        out[dst_lo:dst_lo + count] = series.values[src_lo:src_lo + count]
    return out


def _shift(values: np.ndarray, lag: int) -> np.ndarray:
    """``out[t] = values[t + lag]`` with NaN past either end."""
    out = np.full(values.size, np.nan)
    if lag >= 0:
        if lag < values.size:
            out[: values.size - lag] = values[lag:]
    elif -lag < values.size:
        out[-lag:] = values[:lag]
    return out


def _clip(origin, raw: np.ndarray) -> RatioEstimate:
    finite = ~np.isnan(raw)
    clipped = np.zeros(raw.size, dtype=bool)
    clipped[finite] = (raw[finite] > 1) | (raw[finite] < 0)
    vals = raw.copy()
    vals[finite] = np.clip(raw[finite], 0.0, 1.0)
    return RatioEstimate(SeverityCurve(origin, vals), clipped)


def _divide(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.full(num.size, np.nan)
    ok = ~np.isnan(num) & ~np.isnan(den) & (den != 0)
    out[ok] = num[ok] / den[ok]
    return out


def default_lag(delay: DelayDistribution) -> int:
    """Rounded mean of the delay distribution."""
    return int(round(delay.mean()))


def lagged_ratio(X: CountSeries, Y: CountSeries, lag: int, mode: SmoothingMode) -> RatioEstimate:
    """Ratio of smoothed secondary to smoothed primary counts ``lag`` days apart.

    Real-time (trailing): ``Y~_t / X~_{t-lag}``.  Retrospective (centered):
    ``Y~_{t+lag} / X~_t``.  Either way the result estimates ``p_t``.
    """
    if lag < 0:
        raise ParameterError("lag must be nonnegative")
    n = len(X)
    xs = smooth_values(X.values, mode)
    ys = smooth_values(_on_axis(Y, X.origin, n), mode)
    if mode.realtime:
        raw = _divide(ys, _shift(xs, -lag))
    else:
        raw = _divide(_shift(ys, lag), xs)
    return _clip(X.origin, raw)


def _convolved_primary(xs: np.ndarray, delay: DelayDistribution, origin) -> np.ndarray:
    """``sum_k xs[s-k] pi_k^{(s-k)}`` for every ``s``; NaN without full history."""
    d = delay.d
    n = xs.size
    pi = delay.matrix(origin, n)
    padded_x = np.concatenate((np.full(d, np.nan), xs))
    padded_pi = np.concatenate((np.repeat(pi[:1], d, axis=0), pi))
    idx = np.arange(d, n + d)[:, None] - np.arange(d + 1)[None, :]
    weights = padded_pi[idx, np.arange(d + 1)[None, :]]
    # lags without delay mass do not need primary history
    terms = np.where(weights > 0, padded_x[idx] * weights, 0.0)
    return terms.sum(axis=1)


def conv_ratio_realtime(X: CountSeries, Y: CountSeries, delay: DelayDistribution,
                        window: int) -> RatioEstimate:
    """Real-time convolutional ratio ``Y~_t / sum_k X~_{t-k} pi_k^{(t-k)}`` (trailing)."""
    mode = SmoothingMode(window, TRAILING)
    n = len(X)
    xs = smooth_values(X.values, mode)
    ys = smooth_values(_on_axis(Y, X.origin, n), mode)
    return _clip(X.origin, _divide(ys, _convolved_primary(xs, delay, X.origin)))


def conv_ratio_retrospective(X: CountSeries, Y: CountSeries, delay: DelayDistribution,
                             window: int) -> RatioEstimate:
    """Retrospective convolutional ratio with centered smoothing.

    ``p_t = sum_k pi_k^{(t)} Y~_{t+k} / sum_j X~_{t+k-j} pi_j^{(t+k-j)}``.  If any
    inner denominator with positive weight ``pi_k^{(t)}`` is zero or unavailable
    the estimate at ``t`` is NaN.
    """
    mode = SmoothingMode(window, CENTERED)
    n = len(X)
    d = delay.d
    xs = smooth_values(X.values, mode)
    ys = smooth_values(_on_axis(Y, X.origin, n), mode)
    den = _convolved_primary(xs, delay, X.origin)
    inner = _divide(ys, den)
    bad = np.isnan(den) | (den == 0)
    inner[bad & ~np.isnan(ys)] = np.nan
    pi = delay.matrix(X.origin, n)
    ahead = sliding_window_view(np.concatenate((inner, np.full(d, np.nan))), d + 1)
    raw = np.sum(np.where(pi > 0, ahead * pi, 0.0), axis=1)
    raw[np.any((pi > 0) & np.isnan(ahead), axis=1)] = np.nan
    return _clip(X.origin, raw)
