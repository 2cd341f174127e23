"""Flat ``key = value`` experiment configuration.

Lines are ``key = value``; ``#`` starts a comment.  Lists are comma
separated.  Every key is a field of :class:`ExperimentConfig`; unknown keys
are rejected.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

from .simulate import BETA_BINOMIAL, POISSON_BINOMIAL, PRESETS
from .tune import DEFAULT_K, DEFAULT_M, GAMMA_GRID, LAMBDA_RATIO, N_LAMBDA, RULES, WINDOW_GRID

RETROSPECTIVE = "retrospective"
REALTIME = "realtime"
SETTINGS = (RETROSPECTIVE, REALTIME)
RETRO_OFFSETS = (-3, -2, -1, 0, 1, 2, 3)
REALTIME_OFFSETS = (-5, -3, -1, 0, 1, 3, 5)


class ConfigError(ValueError):
    """The configuration is malformed or inconsistent."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _split(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


@dataclass(frozen=True)
class ExperimentConfig:
    """Settings of a simulation experiment.

    ``regions`` names synthetic presets.  With ``primary_file`` set, a single
    region is built from that primary series, ``variants_file`` proportions
    and per-variant ``variant_rates`` (``name:rate`` pairs).
    """

    regions: tuple = ("large", "medium", "small")
    setting: str = RETROSPECTIVE
    noise: str = ""
    delay_source: str = "fixed"
    delay_mean: float = 0.0
    scan_max_lag: int = 45
    methods: tuple = ("deconv-0", "conv", "lagged")
    rules: tuple = RULES
    realtime_deconv_rules: tuple = ("min",)
    oracle: bool = False
    lambda_count: int = N_LAMBDA
    lambda_ratio: float = LAMBDA_RATIO
    gammas: tuple = tuple(float(g) for g in GAMMA_GRID)
    windows: tuple = WINDOW_GRID
    K: int = DEFAULT_K
    M: int = DEFAULT_M
    replicates: int = 10
    seed: int = 0
    cadence: int = 7
    burn_in: int = 184
    burn_out: int = 88
    fit_window: int = 200
    retune_every: int = 168
    misspec_offsets: tuple = ()
    workers: int = 1
    primary_file: str = ""
    variants_file: str = ""
    variant_rates: tuple = ()
    delay_support: int = 60

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.noise not in ("", POISSON_BINOMIAL, BETA_BINOMIAL):
            raise ConfigError(f"unknown noise model {self.noise!r}")
        if self.delay_source not in ("fixed", "scan"):
            raise ConfigError("delay_source must be 'fixed' or 'scan'")
        if self.cadence < 1:
            raise ConfigError("cadence must be at least 1")
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if min(self.burn_in, self.burn_out) < 0:
            raise ConfigError("burn lengths must be nonnegative")
        if self.fit_window < 1 or self.retune_every < 1 or self.workers < 1:
            raise ConfigError("fit_window, retune_every and workers must be positive")
        if any(r not in RULES for r in self.rules + self.realtime_deconv_rules):
            raise ConfigError(f"rules must be among {RULES}")
        if self.primary_file:
            for path in (self.primary_file, self.variants_file):
                if not path or not Path(path).is_file():
                    raise ConfigError(f"input file not found: {path!r}")
            if not self.variant_rates:
                raise ConfigError("variant_rates are required with a primary file")
        else:
            unknown = [r for r in self.regions if r not in PRESETS]
            if unknown:
                raise ConfigError(f"unknown regions {unknown}; presets are {sorted(PRESETS)}")

    @property
    def noise_model(self) -> str:
        if self.noise:
            return self.noise
        return POISSON_BINOMIAL if self.setting == RETROSPECTIVE else BETA_BINOMIAL

    @property
    def offsets(self) -> tuple:
        if self.misspec_offsets:
            return tuple(sorted(set(self.misspec_offsets) | {0}))
        return RETRO_OFFSETS if self.setting == RETROSPECTIVE else REALTIME_OFFSETS

    def rates_by_variant(self) -> dict[str, float]:
        out = {}
        for item in self.variant_rates:
            name, sep, rate = str(item).partition(":")
            if not sep:
                raise ConfigError(f"variant rate {item!r} is not name:rate")
            out[name.strip()] = float(rate)
        return out

    @classmethod
    def from_mapping(cls, items: dict) -> "ExperimentConfig":
        kinds = {f.name: f for f in fields(cls)}
        kw = {}
        for key, text in items.items():
            key = key.strip().replace("-", "_")
            if key not in kinds:
                raise ConfigError(f"unknown config key {key!r}")
            kw[key] = _convert(kinds[key].default, str(text), key)
        return cls(**kw)

    def to_text(self) -> str:
        """Canonical text form; parsing it gives back an equal config."""
        lines = []
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, tuple):
                val = ",".join(_fmt(v) for v in val)
            else:
                val = _fmt(val)
            lines.append(f"{f.name} = {val}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def _convert(default, text: str, key: str):
    try:
        if isinstance(default, bool):
            return _parse_bool(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            parts = _split(text)
            sample = default[0] if default else ""
            if key in ("misspec_offsets",):
                return tuple(int(p) for p in parts)
            if isinstance(sample, bool):
                return tuple(_parse_bool(p) for p in parts)
            if isinstance(sample, int):
                return tuple(int(p) for p in parts)
            if isinstance(sample, float):
                return tuple(float(p) for p in parts)
            return tuple(parts)
        return text.strip()
    except ValueError as err:
        raise ConfigError(f"bad value for {key}: {text!r} ({err})") from None


def parse_config_text(text: str) -> dict:
    items = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        items[key.strip()] = value.strip()
    return items


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a config file; ``overrides`` (e.g. command-line flags) win."""
    items = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    items.update(overrides or {})
    return ExperimentConfig.from_mapping(items)

