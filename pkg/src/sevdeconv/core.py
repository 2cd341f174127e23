"""Time-series containers, delay distributions and the linear operators shared
by the estimators.

All series live on a daily axis anchored at an ISO date.  Alignment between
series is resolved once, when an operator is built, so downstream code only
ever sees plain index arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date, timedelta
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided, sliding_window_view
from scipy import stats

DEFAULT_SUPPORT = 60
MASS_TOL = 1e-12


class AlignmentError(ValueError):
    """Two series do not share the required stretch of the time axis."""


class ParameterError(ValueError):
    """An argument lies outside its admissible range."""


class DegenerateError(ValueError):
    """A quantity is undefined for the supplied inputs."""


def _frozen(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def day_offset(origin: date, day: date) -> int:
    return (day - origin).days


@dataclass(frozen=True)
class CountSeries:
    """Nonnegative integer event counts on a gap-free daily axis."""

    origin: date
    values: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.values)
        if raw.ndim != 1:
            raise ValueError("counts must be one-dimensional")
        if raw.size and not np.all(np.equal(np.mod(raw, 1), 0)):
            raise ValueError("counts must be integers")
        vals = _frozen(raw, np.int64)
        if np.any(vals < 0):
            raise ValueError("counts must be nonnegative")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.size

    @property
    def end(self) -> date:
        """Last day covered (inclusive)."""
        return self.origin + timedelta(days=len(self) - 1)

    def dates(self) -> list[date]:
        return [self.origin + timedelta(days=i) for i in range(len(self))]

    def window(self, start: date, length: int) -> np.ndarray:
        """Values on ``[start, start + length)``; raises if not covered."""
        lo = day_offset(self.origin, start)
        if lo < 0 or lo + length > len(self):
            raise AlignmentError(
                f"series on {self.origin}..{self.end} does not cover "
                f"{start}..{start + timedelta(days=length - 1)}"
            )
        return self.values[lo:lo + length]


@dataclass(frozen=True)
class SeverityCurve:
    """Rates in [0, 1] on a daily axis.  NaN marks a missing estimate."""

    origin: date
    values: np.ndarray

    def __post_init__(self):
        vals = _frozen(self.values, float)
        if vals.ndim != 1:
            raise ValueError("severity curve must be one-dimensional")
        finite = vals[~np.isnan(vals)]
        if np.any(finite < 0) or np.any(finite > 1):
            raise ValueError("severity rates must lie in [0, 1]")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.size

    @property
    def end(self) -> date:
        return self.origin + timedelta(days=len(self) - 1)

    def window(self, start: date, length: int) -> np.ndarray:
        lo = day_offset(self.origin, start)
        if lo < 0 or lo + length > len(self):
            raise AlignmentError(
                f"severity curve on {self.origin}..{self.end} does not cover "
                f"{start}..{start + timedelta(days=length - 1)}"
            )
        return self.values[lo:lo + length]


@dataclass(frozen=True)
class DelayDistribution:
    """Delay from primary to secondary event, conditional on the latter occurring.

    ``mass[k]`` is the probability of a delay of ``k`` days.  An optional
    ``table`` overrides the shared vector for primary events on specific days.
    ``mean_days``/``sd_days`` record the continuous gamma this was discretized
    from, when known.
    """

    mass: np.ndarray
    table: Mapping[date, np.ndarray] = field(default_factory=dict)
    mean_days: float | None = None
    sd_days: float | None = None

    def __post_init__(self):
        mass = _frozen(self.mass, float)
        _check_mass(mass)
        table = {}
        for day, vec in dict(self.table).items():
            vec = _frozen(vec, float)
            if vec.shape != mass.shape:
                raise ParameterError(f"delay table entry for {day} has support "
                                     f"{vec.size - 1}, expected {mass.size - 1}")
            _check_mass(vec)
            table[day] = vec
        object.__setattr__(self, "mass", mass)
        object.__setattr__(self, "table", table)

    @property
    def d(self) -> int:
        return self.mass.size - 1

    @property
    def constant(self) -> bool:
        return not self.table

    def at(self, day: date) -> np.ndarray:
        return self.table.get(day, self.mass)

    def matrix(self, origin: date, n: int) -> np.ndarray:
        """Row ``j`` holds the delay vector for primary events on ``origin + j``."""
        out = np.broadcast_to(self.mass, (n, self.d + 1)).copy()
        for day, vec in self.table.items():
            j = day_offset(origin, day)
            if 0 <= j < n:
                out[j] = vec
        return out

    def mean(self) -> float:
        return float(np.dot(np.arange(self.d + 1), self.mass))

    def cdf(self) -> np.ndarray:
        return np.cumsum(self.mass)


def _check_mass(mass: np.ndarray):
    if mass.ndim != 1 or mass.size == 0:
        raise ParameterError("delay mass must be a nonempty vector")
    if np.any(mass < 0) or not np.isfinite(mass).all():
        raise ParameterError("delay mass must be nonnegative and finite")
    if abs(mass.sum() - 1.0) > MASS_TOL:
        raise ParameterError(f"delay mass sums to {mass.sum():.15g}, not 1")


def point_mass(lag: int, d: int | None = None) -> DelayDistribution:
    d = lag if d is None else d
    if not 0 <= lag <= d:
        raise ParameterError(f"lag {lag} outside support 0..{d}")
    mass = np.zeros(d + 1)
    mass[lag] = 1.0
    return DelayDistribution(mass)


def discretized_gamma(mean: float, sd: float, d: int = DEFAULT_SUPPORT) -> DelayDistribution:
    """Gamma delay discretized as ``pi_k ∝ F(k+1) - F(k)`` on ``0..d``.

    Shape and scale are matched to ``mean`` and ``sd`` of the continuous
    distribution; mass beyond ``d`` is dropped and the rest renormalized.
    """
    if not (mean > 0 and sd > 0):
        raise ParameterError(f"gamma delay needs positive mean and sd, got {mean}, {sd}")
    if d < 1:
        raise ParameterError("delay support must be at least 1 day")
    shape = (mean / sd) ** 2
    scale = sd ** 2 / mean
    cdf = stats.gamma.cdf(np.arange(d + 2), a=shape, scale=scale)
    mass = np.diff(cdf)
    mass = mass / mass.sum()
    # renormalize once more so the sum is 1 to the last ulp
    mass = mass / mass.sum()
    return DelayDistribution(mass, mean_days=float(mean), sd_days=float(sd))


class DifferenceOperator:
    """The ``(n - order) x n`` discrete difference matrix ``D^(order)``."""

    def __init__(self, order: int, n: int):
        if order < 1:
            raise ParameterError("difference order must be >= 1")
        if n <= order:
            raise ParameterError(f"need n > order, got n={n}, order={order}")
        self.order = order
        self.n = n

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n - self.order, self.n)

    def __matmul__(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            return np.diff(x, n=self.order, axis=0)
        return np.diff(x, n=self.order)

    def rmatvec(self, v) -> np.ndarray:
        """``D^T v``, applying the first-difference adjoint ``order`` times."""
        out = np.asarray(v, dtype=float)
        for _ in range(self.order):
            out = -np.diff(np.concatenate(([0.0], out, [0.0])))
        return out

    @property
    def matrix(self) -> np.ndarray:
        return np.diff(np.eye(self.n), n=self.order, axis=0)

    def stencil(self) -> np.ndarray:
        """Coefficients of a single row, e.g. ``[1, -2, 1]`` for order 2."""
        return np.diff(np.eye(self.order + 1), n=self.order, axis=0)[0]


def diff_matrix(order: int, n: int) -> DifferenceOperator:
    return DifferenceOperator(order, n)


class ConvolutionOperator:
    """Nonnegative map from severity rates to expected secondary counts.

    ``(A p)_t = sum_k X_{t-k} pi_k^{(t-k)} p_{t-k}`` for the ``n_y`` secondary
    days starting at ``y_origin``.  The rate axis starts ``d`` days earlier and
    has ``n_y + d`` entries.
    """

    def __init__(self, X: CountSeries, delay: DelayDistribution, y_origin: date, n_y: int):
        if n_y < 1:
            raise ParameterError("need at least one secondary day")
        self.delay = delay
        self.d = d = delay.d
        self.n_y = n_y
        self.n_p = n_y + d
        self.y_origin = y_origin
        self.p_origin = y_origin - timedelta(days=d)
        x = X.window(self.p_origin, self.n_p).astype(float)
        pi = delay.matrix(self.p_origin, self.n_p)
        # coef[i, j] multiplies p[i + j] in row i; that rate sits at lag d - j
        cols = np.arange(n_y)[:, None] + np.arange(d + 1)[None, :]
        self.coef = x[cols] * pi[cols, d - np.arange(d + 1)[None, :]]
        self.coef.setflags(write=False)
        self.x = x

    @classmethod
    def from_arrays(cls, x, mass) -> "ConvolutionOperator":
        """Operator for raw arrays: ``x`` on the rate axis, constant delay ``mass``."""
        mass = np.asarray(mass, float)
        x = np.asarray(x)
        origin = date(2000, 1, 1)
        n_y = x.size - (mass.size - 1)
        return cls(CountSeries(origin, x), DelayDistribution(mass),
                   origin + timedelta(days=mass.size - 1), n_y)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_y, self.n_p)

    def matvec(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.einsum("ij,ij->i", self.coef, sliding_window_view(p, self.d + 1))

    def rmatvec(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        d = self.d
        padded = np.concatenate((np.zeros(d), v, np.zeros(d)))
        lagged = sliding_window_view(padded, d + 1)[:, ::-1]
        return np.einsum("ij,ij->i", self._by_column(), lagged)

    def row_sums(self) -> np.ndarray:
        return self.coef.sum(axis=1)

    def gram_banded(self, h) -> np.ndarray:
        """Upper banded storage of ``A^T diag(h) A`` (bandwidth ``d``)."""
        h = np.asarray(h, dtype=float)
        d = self.d
        by_col = self._by_column()
        hq = self._skew(self.coef * h[:, None])
        ab = np.zeros((d + 1, self.n_p))
        for o in range(d + 1):
            # entry (c, c + o) = sum_j h_{c-j} coef[c-j, j] coef[c-j, j+o]
            ab[d - o, o:] = np.einsum("ij,ij->i", hq[: self.n_p - o, : d + 1 - o], by_col[o:, o:])
        return ab

    def _skew(self, rows: np.ndarray) -> np.ndarray:
        # out[c, j] = rows[c - j, j], zero outside
        n, w = rows.shape
        out = np.zeros((n + w - 1, w))
        step = out.strides
        as_strided(out, shape=(n, w), strides=(step[0], step[0] + step[1]),
                   writeable=True)[...] = rows
        return out

    def _by_column(self) -> np.ndarray:
        if not hasattr(self, "_bycol"):
            self._bycol = self._skew(self.coef)
        return self._bycol

    def todense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        rows = np.repeat(np.arange(self.n_y), self.d + 1)
        cols = (np.arange(self.n_y)[:, None] + np.arange(self.d + 1)[None, :]).ravel()
        out[rows, cols] = self.coef.ravel()
        return out


class SecondaryMoments(NamedTuple):
    origin: date
    mean: np.ndarray
    var: np.ndarray


def _rate_terms(delay: DelayDistribution, p: SeverityCurve) -> tuple[np.ndarray, date]:
    """``terms[i, k] = pi_k^{(t-k)} p_{t-k}`` for each ``t`` with full history."""
    d = delay.d
    n = len(p) - d
    if n < 1:
        raise AlignmentError(f"severity curve of length {len(p)} is shorter than "
                             f"the delay support {d} + 1")
    pi = delay.matrix(p.origin, len(p))
    t = np.arange(d, len(p))[:, None]
    lag = np.arange(d + 1)[None, :]
    return pi[t - lag, lag] * p.values[t - lag], p.origin + timedelta(days=d)


def expected_secondary(X: CountSeries, delay: DelayDistribution,
                       p: SeverityCurve) -> SecondaryMoments:
    """Conditional mean and variance of secondary counts.

    Returned on the days ``t`` whose full history ``t-d..t`` is covered by
    ``p``, i.e. starting ``d`` days after ``p.origin``.
    """
    terms, origin = _rate_terms(delay, p)
    d = delay.d
    x = X.window(p.origin, len(p)).astype(float)
    xw = sliding_window_view(x, d + 1)[:, ::-1]
    mean = np.sum(xw * terms, axis=1)
    var = np.sum(xw * terms * (1.0 - terms), axis=1)
    return SecondaryMoments(origin, mean, var)


def primary_pool(X: CountSeries, d: int, origin: date, n: int) -> np.ndarray:
    """``sum_{k<=d} X_{t-k}`` for ``n`` days from ``origin``: the trial count at ``t``."""
    x = X.window(origin - timedelta(days=d), n + d).astype(float)
    return sliding_window_view(x, d + 1).sum(axis=1)


def _index(p: SeverityCurve, t) -> int:
    idx = day_offset(p.origin, t) if isinstance(t, date) else int(t)
    return idx


def max_success_probability(delay: DelayDistribution, p: SeverityCurve, t) -> float:
    idx = _index(p, t)
    d = delay.d
    if idx - d < 0 or idx >= len(p):
        raise AlignmentError(f"rates do not cover {d} days of history before index {idx}")
    lags = np.arange(d + 1)
    pi = delay.matrix(p.origin, len(p))
    return float(np.max(pi[idx - lags, lags] * p.values[idx - lags]))


def correlation_bound(delay: DelayDistribution, p: SeverityCurve, t) -> float:
    """Lower end of the admissible range of ``Cor(Y_t, Y_{t+1} | X)``.

    The correlation of successive secondary counts lies in ``[-q/(1-q), 0]``
    with ``q = max_k pi_k^{(t-k)} p_{t-k}``.
    """
    q = max_success_probability(delay, p, t)
    if q >= 1.0:
        raise DegenerateError("largest success probability is 1; bound is -inf")
    return -q / (1.0 - q)


def poisson_tv_bound(delay: DelayDistribution, p: SeverityCurve, t) -> float:
    """``sum_k (pi_k^{(t-k)} p_{t-k})^2``, bounding the total variation distance
    between the Poisson-binomial law of ``Y_t`` and its Poisson approximation."""
    idx = _index(p, t)
    d = delay.d
    if idx - d < 0 or idx >= len(p):
        raise AlignmentError(f"rates do not cover {d} days of history before index {idx}")
    lags = np.arange(d + 1)
    pi = delay.matrix(p.origin, len(p))
    return float(np.sum((pi[idx - lags, lags] * p.values[idx - lags]) ** 2))


def backward_rate(delay: DelayDistribution, p: SeverityCurve) -> SeverityCurve:
    """Delay-weighted mix of past rates, ``sum_k pi_k^{(t-k)} p_{t-k}``."""
    terms, origin = _rate_terms(delay, p)
    return SeverityCurve(origin, np.clip(terms.sum(axis=1), 0.0, 1.0))


def as_values(series) -> np.ndarray:
    """Plain array view of a series-like argument."""
    if isinstance(series, (CountSeries, SeverityCurve)):
        return series.values
    return np.asarray(series)


def date_range(origin: date, n: int) -> list[date]:
    return [origin + timedelta(days=i) for i in range(n)]


def constant_curve(origin: date, n: int, value: float) -> SeverityCurve:
    return SeverityCurve(origin, np.full(n, float(value)))


__all__: Sequence[str] = [
    "AlignmentError", "ParameterError", "DegenerateError", "CountSeries",
    "SeverityCurve", "DelayDistribution", "DifferenceOperator", "ConvolutionOperator",
    "SecondaryMoments", "diff_matrix", "discretized_gamma", "point_mass",
    "expected_secondary", "correlation_bound", "poisson_tv_bound", "backward_rate",
    "primary_pool", "max_success_probability", "constant_curve", "date_range",
]
