"""Ground-truth severity curves and synthetic secondary counts."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np
from scipy.special import expit

from .core import (
    AlignmentError,
    CountSeries,
    DegenerateError,
    DelayDistribution,
    ParameterError,
    SeverityCurve,
    day_offset,
    discretized_gamma,
    expected_secondary,
    primary_pool,
)
from .smoothing import penalized_smoother

log = logging.getLogger(__name__)

POISSON_BINOMIAL = "poisson_binomial"
BETA_BINOMIAL = "beta_binomial"
SD_RATIO = 0.9


class DispersionError(ValueError):
    """The requested overdispersion cannot be realized by a beta-binomial."""


def make_rng(seed, *key) -> np.random.Generator:
    """Independent stream for ``(seed, *key)``, e.g. ``key = (region, replicate)``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


@dataclass(frozen=True)
class VariantProfile:
    name: str
    rate: float
    origin: date
    proportions: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ParameterError(f"variant {self.name}: rate {self.rate} outside [0, 1]")
        c = np.asarray(self.proportions, float)
        if np.any(c < 0) or np.any(c > 1):
            raise ParameterError(f"variant {self.name}: proportions outside [0, 1]")
        c.setflags(write=False)
        object.__setattr__(self, "proportions", c)


@dataclass(frozen=True)
class DispersionFit:
    beta: float
    smooth: np.ndarray
    residuals: np.ndarray


@dataclass(frozen=True)
class NoiseModel:
    kind: str = POISSON_BINOMIAL
    beta: float = 1.0

    def __post_init__(self):
        if self.kind not in (POISSON_BINOMIAL, BETA_BINOMIAL):
            raise ParameterError(f"unknown noise model {self.kind!r}")
        if self.beta <= 0:
            raise ParameterError("overdispersion multiplier must be positive")


def variant_hfr_curve(profiles: list[VariantProfile]) -> SeverityCurve:
    """Mix per-variant rates by circulation share: ``p_t = sum_v c_t^v p^v``."""
    if not profiles:
        raise ParameterError("need at least one variant")
    origin = profiles[0].origin
    n = profiles[0].proportions.size
    for v in profiles:
        if v.origin != origin or v.proportions.size != n:
            raise AlignmentError("variant proportions are not on a common axis")
    c = np.stack([v.proportions for v in profiles])
    total = c.sum(axis=0)
    bad = np.flatnonzero(np.abs(total - 1.0) > 1e-9)
    if bad.size:
        raise ParameterError(f"variant proportions do not sum to 1 at day indices {bad[:5].tolist()}")
    rates = np.array([v.rate for v in profiles])
    p = rates @ c
    return SeverityCurve(origin, np.clip(p, rates.min(), rates.max()))


def dominance_window_rates(X: CountSeries, Y: CountSeries, profiles: list[VariantProfile],
                           shift: int = 14) -> dict[str, float]:
    """Per-variant rate as shifted secondary over primary totals while dominant.

    A variant is dominant on the days where its share exceeds 1/2 (a closed
    window over those days).  Secondary counts are summed over the same days
    moved ``shift`` days later; days whose shifted date leaves ``Y`` are dropped.
    """
    out = {}
    for v in profiles:
        days = np.flatnonzero(v.proportions > 0.5)
        num = den = 0.0
        for j in days:
            t = v.origin + timedelta(days=int(j))
            ty = t + timedelta(days=shift)
            ix, iy = day_offset(X.origin, t), day_offset(Y.origin, ty)
            if 0 <= ix < len(X) and 0 <= iy < len(Y):
                num += Y.values[iy]
                den += X.values[ix]
        if den > 0:
            out[v.name] = float(min(num / den, 1.0))
    return out


def _cohort_rates(delay: DelayDistribution, p: SeverityCurve) -> np.ndarray:
    return delay.matrix(p.origin, len(p))


def sample_poisson_binomial(X: CountSeries, delay: DelayDistribution, p: SeverityCurve,
                            seed, *key) -> CountSeries:
    """Draw secondary counts from the individual-level model.

    Each primary event on day ``s`` leads to a secondary event with
    probability ``p_s``, after a delay drawn from ``pi^{(s)}``.  Summing over
    cohorts, ``Y_t`` is Poisson-binomial with success probabilities
    ``pi_k p_{t-k}`` repeated ``X_{t-k}`` times.  Output covers the days with
    full history: ``p.origin + d`` through ``p.end``.
    """
    rng = make_rng(seed, *key)
    d = delay.d
    n = len(p)
    if n <= d:
        raise AlignmentError(f"severity curve shorter than delay support {d} + 1")
    x = X.window(p.origin, n)
    events = rng.binomial(x, p.values)
    pi = _cohort_rates(delay, p)
    lags = rng.multinomial(events, pi)
    y = np.zeros(n + d, dtype=np.int64)
    for k in range(d + 1):
        y[k:k + n] += lags[:, k]
    return CountSeries(p.origin + timedelta(days=d), y[d:n])


def estimate_dispersion(Y: CountSeries | np.ndarray) -> DispersionFit:
    """Overdispersion relative to the mean, from a smooth fit of ``Y``.

    Squared residuals are regressed on the fitted mean without intercept; the
    slope is the multiplier ``beta`` (1 for Poisson-like counts).  The regressor
    is the fitted mean propagated through ``(I - S)**2`` elementwise, where
    ``S`` is the smoother matrix, so noise absorbed by the smooth fit does not
    bias ``beta`` downward.
    """
    y = np.asarray(Y.values if isinstance(Y, CountSeries) else Y, float)
    if y.size < 60:
        raise ParameterError(f"need at least 60 days to estimate dispersion, got {y.size}")
    if not np.any(y > 0):
        raise DegenerateError("secondary counts are identically zero")
    fitted, S = penalized_smoother(y)
    fitted = np.maximum(fitted, 0.0)
    resid = y - fitted
    leak = np.eye(y.size) - S
    regressor = (leak ** 2) @ fitted
    beta = float(regressor @ resid ** 2) / float(regressor @ regressor)
    return DispersionFit(beta, fitted, resid)


def beta_binomial_params(mean, var, trials, beta: float):
    """Mean-rho parameters ``(M, rho)`` giving mean ``mean`` and variance ``beta * var``.

    ``M = mean / n``; ``rho = (beta var / (n M (1 - M)) - 1) / (n - 1)``.
    Negative ``rho`` (underdispersion) is clamped to 0 with a warning.
    """
    mean = np.atleast_1d(np.asarray(mean, float))
    var = np.atleast_1d(np.asarray(var, float))
    n = np.atleast_1d(np.asarray(trials, float))
    bad = np.flatnonzero(~((mean > 0) & (mean < n) & (n >= 2)))
    if bad.size:
        raise DispersionError(f"need 0 < mean < trials and trials >= 2; violated at {bad[:5].tolist()}")
    M = mean / n
    rho = (beta * var / (n * M * (1 - M)) - 1.0) / (n - 1)
    high = np.flatnonzero(rho >= 1)
    if high.size:
        raise DispersionError(f"overdispersion infeasible (rho >= 1) at indices {high[:5].tolist()}")
    low = rho < 0
    if low.any():
        log.warning("underdispersed target at %d days; rho clamped to 0", int(low.sum()))
        rho = np.where(low, 0.0, rho)
    return M, rho


def sample_beta_binomial(X: CountSeries, delay: DelayDistribution, p: SeverityCurve,
                         beta: float, seed, *key) -> CountSeries:
    """Independent beta-binomial counts matching the model mean and ``beta`` times its variance.

    The trial count on day ``t`` is ``sum_{k<=d} X_{t-k}``.  Days with zero mean
    produce zero.
    """
    rng = make_rng(seed, *key)
    mom = expected_secondary(X, delay, p)
    n = primary_pool(X, delay.d, mom.origin, mom.mean.size)
    y = np.zeros(mom.mean.size, dtype=np.int64)
    live = mom.mean > 0
    if live.any():
        M, rho = beta_binomial_params(mom.mean[live], mom.var[live], n[live], beta)
        y[live] = _draw_beta_binomial(rng, n[live].astype(np.int64), M, rho)
    return CountSeries(mom.origin, y)


def _draw_beta_binomial(rng, n, M, rho):
    q = M.copy()
    over = rho > 0
    if over.any():
        k = 1.0 / rho[over] - 1.0
        q[over] = rng.beta(M[over] * k, (1 - M[over]) * k)
    return rng.binomial(n, q)


def misspecify_delay(delay: DelayDistribution, mean_offset: float) -> DelayDistribution:
    """Gamma delay with mean shifted by ``mean_offset`` days and sd 90% of the new mean."""
    if delay.mean_days is None:
        raise ParameterError("delay does not record the gamma mean it was built from")
    mean = delay.mean_days + mean_offset
    if mean <= 0:
        raise ParameterError(f"shifted delay mean {mean} is not positive")
    return discretized_gamma(mean, SD_RATIO * mean, delay.d)


# ---------------------------------------------------------------------------
# synthetic regions


@dataclass(frozen=True)
class Wave:
    center: float
    width: float
    height: float


@dataclass(frozen=True)
class RegionPreset:
    """Recipe for a synthetic region: primary waves, variant sweeps, delays.

    Wave heights are relative to ``scale`` (peak daily primary count of a
    unit-height wave).  ``takeovers`` are the days a variant's share crosses
    one half; ``takeover_widths`` are the logistic scales of each sweep.
    """

    name: str
    scale: float
    waves: tuple[Wave, ...]
    baseline: float
    variant_rates: tuple[float, ...]
    takeovers: tuple[float, ...]
    takeover_widths: tuple[float, ...]
    delay_mean: float = 14.0
    realtime_delay_mean: float = 20.0
    beta: float = 2.0
    n_days: int = 930
    origin: date = date(2020, 7, 1)
    d: int = 60
    shift: int = 0


@dataclass
class Region:
    name: str
    X: CountSeries
    p: SeverityCurve
    delay: DelayDistribution
    variants: list[VariantProfile] = field(default_factory=list)
    beta: float = 1.0

    @property
    def y_origin(self) -> date:
        return self.p.origin + timedelta(days=self.delay.d)


def variant_sweeps(n: int, origin: date, rates, takeovers, widths,
                   names=None) -> list[VariantProfile]:
    """Successive logistic takeovers; variant ``v`` displaces all earlier ones."""
    t = np.arange(n, dtype=float)
    widths = np.broadcast_to(np.asarray(widths, float), (len(takeovers),))
    share_after = ([np.ones(n)] + [expit((t - tau) / w) for tau, w in zip(takeovers, widths)]
                   + [np.zeros(n)])
    raw = [np.clip(share_after[v] - share_after[v + 1], 0.0, 1.0) for v in range(len(rates))]
    # exact partition of unity despite rounding
    total = sum(raw)
    names = names or [f"v{v}" for v in range(len(rates))]
    return [VariantProfile(name, rate, origin, c / total) for name, rate, c in
            zip(names, rates, raw)]


def primary_curve(preset: RegionPreset) -> np.ndarray:
    t = np.arange(preset.n_days, dtype=float)
    level = np.full(preset.n_days, float(preset.baseline))
    for w in preset.waves:
        level += w.height * np.exp(-0.5 * ((t - w.center - preset.shift) / w.width) ** 2)
    return preset.scale * level


def build_region(preset: RegionPreset, seed=0, key=(), realtime: bool = False) -> Region:
    """Primary counts (Poisson around the wave curve) with the mixed-variant rate.

    ``realtime`` selects the longer report-date delay used for real-time data.
    """
    rng = make_rng(seed, *key)
    x = rng.poisson(primary_curve(preset)).astype(np.int64)
    takeovers = tuple(tau + preset.shift for tau in preset.takeovers)
    variants = variant_sweeps(preset.n_days, preset.origin, preset.variant_rates,
                              takeovers, preset.takeover_widths)
    p = variant_hfr_curve(variants)
    mean = preset.realtime_delay_mean if realtime else preset.delay_mean
    delay = discretized_gamma(mean, SD_RATIO * mean, preset.d)
    return Region(preset.name, CountSeries(preset.origin, x), p, delay, variants, preset.beta)


# Day 0 is 2020-07-01.  Waves and sweeps follow the broad shape of the US
# pandemic: original strain, then Alpha (spring 2021), Delta (summer 2021)
# and Omicron (from late December 2021).
US_WAVES = (
    Wave(24, 18, 0.35),     # summer 2020
    Wave(191, 35, 1.0),     # winter 2020-21
    Wave(283, 20, 0.3),     # spring 2021
    Wave(427, 25, 0.75),    # late summer 2021
    Wave(560, 16, 1.3),     # winter 2021-22
    Wave(749, 35, 0.35),    # summer 2022
    Wave(907, 25, 0.35),    # winter 2022-23
)
VARIANT_NAMES = ("original", "alpha", "delta", "omicron")
VARIANT_RATES = (0.20, 0.16, 0.22, 0.085)
TAKEOVERS = (262.0, 359.0, 539.0)
TAKEOVER_WIDTHS = (9.0, 6.0, 3.5)

PRESETS = {
    "large": RegionPreset("large", 2500.0, US_WAVES, 0.05, VARIANT_RATES, TAKEOVERS,
                          TAKEOVER_WIDTHS, delay_mean=12.0, realtime_delay_mean=18.0,
                          beta=2.5, shift=0),
    "medium": RegionPreset("medium", 500.0, US_WAVES, 0.05, VARIANT_RATES, TAKEOVERS,
                           TAKEOVER_WIDTHS, delay_mean=14.0, realtime_delay_mean=20.0,
                           beta=2.0, shift=6),
    "small": RegionPreset("small", 90.0, US_WAVES, 0.05, VARIANT_RATES, TAKEOVERS,
                          TAKEOVER_WIDTHS, delay_mean=16.0, realtime_delay_mean=22.0,
                          beta=1.6, shift=12),
}


def national_preset() -> tuple[DelayDistribution, float, float]:
    """National-scale inputs: delay (mean 14, sd 12.6), peak rate and daily primaries."""
    return discretized_gamma(14.0, SD_RATIO * 14.0, 60), 0.32, 12000.0


def sample_secondary(region: Region, noise: NoiseModel, seed, *key,
                     delay: DelayDistribution | None = None) -> CountSeries:
    delay = delay or region.delay
    if noise.kind == POISSON_BINOMIAL:
        return sample_poisson_binomial(region.X, delay, region.p, seed, *key)
    return sample_beta_binomial(region.X, delay, region.p, noise.beta, seed, *key)
