"""CSV input and output with strict schemas.

Schemas: counts ``date,count``; variant proportions ``date,variant,proportion``;
estimates ``date,method,estimate,clipped_flag``.  Dates are ISO-8601.
"""

from __future__ import annotations

import csv
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .core import CountSeries, SeverityCurve
from .simulate import VariantProfile

COUNT_HEADER = ("date", "count")
VARIANT_HEADER = ("date", "variant", "proportion")
ESTIMATE_HEADER = ("date", "method", "estimate", "clipped_flag")
RATE_HEADER = ("date", "rate")
PROPORTION_TOL = 1e-6


class IngestError(ValueError):
    """An input file does not match its schema."""


def fmt_float(x) -> str:
    """Stable text for a float: 12 significant digits, empty for NaN."""
    x = float(x)
    return "" if np.isnan(x) else f"{x:.12g}"


def _rows(path, header) -> list[tuple[int, list[str]]]:
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            head = next(reader, None)
            if head is None or tuple(h.strip().lower() for h in head) != header:
                raise IngestError(f"{path}: header must be {','.join(header)}, got {head}")
            rows = [(n, [c.strip() for c in row]) for n, row in enumerate(reader, 2) if row]
    except OSError as err:
        raise IngestError(f"{path}: {err.strerror}") from None
    for n, row in rows:
        if len(row) != len(header):
            raise IngestError(f"{path}:{n}: expected {len(header)} fields, got {len(row)}")
    return rows


def _date(text: str, where: str) -> date:
    try:
        return date.fromisoformat(text)
    except ValueError:
        raise IngestError(f"{where}: bad date {text!r}") from None


def _check_daily(days: list[date], path) -> None:
    if not days:
        raise IngestError(f"{path}: no data rows")
    for a, b in zip(days, days[1:]):
        if b <= a:
            raise IngestError(f"{path}: dates must be strictly increasing ({a} then {b})")
    missing = []
    for a, b in zip(days, days[1:]):
        missing += [a + timedelta(days=k) for k in range(1, (b - a).days)]
    if missing:
        listed = ", ".join(str(m) for m in missing[:10])
        more = f" and {len(missing) - 10} more" if len(missing) > 10 else ""
        raise IngestError(f"{path}: missing dates {listed}{more}")


def read_raw_counts(path) -> tuple[date, np.ndarray]:
    """Daily integer counts, negatives allowed (raw reports before cleaning)."""
    rows = _rows(path, COUNT_HEADER)
    days, vals = [], []
    for n, (d, c) in rows:
        days.append(_date(d, f"{path}:{n}"))
        try:
            v = float(c)
        except ValueError:
            raise IngestError(f"{path}:{n}: bad count {c!r}") from None
        if v != int(v):
            raise IngestError(f"{path}:{n}: count {c!r} is not an integer")
        vals.append(int(v))
    _check_daily(days, path)
    return days[0], np.asarray(vals, dtype=np.int64)


def read_counts(path) -> CountSeries:
    """Gap-free daily nonnegative counts."""
    origin, vals = read_raw_counts(path)
    neg = np.flatnonzero(vals < 0)
    if neg.size:
        day = origin + timedelta(days=int(neg[0]))
        raise IngestError(f"{path}: negative count {vals[neg[0]]} on {day}")
    return CountSeries(origin, vals)


def read_variants(path) -> list[VariantProfile]:
    """Variant proportion table; each date's proportions must sum to one.

    Profiles carry ``rate = 0``; attach rates with :func:`with_rates`.
    """
    rows = _rows(path, VARIANT_HEADER)
    table: dict[date, dict[str, float]] = {}
    names: list[str] = []
    for n, (d, name, prop) in rows:
        day = _date(d, f"{path}:{n}")
        try:
            val = float(prop)
        except ValueError:
            raise IngestError(f"{path}:{n}: bad proportion {prop!r}") from None
        if not 0.0 <= val <= 1.0:
            raise IngestError(f"{path}:{n}: proportion {val} outside [0, 1]")
        if name in table.setdefault(day, {}):
            raise IngestError(f"{path}:{n}: duplicate entry for {name} on {day}")
        table[day][name] = val
        if name not in names:
            names.append(name)
    days = sorted(table)
    _check_daily(days, path)
    for day in days:
        total = sum(table[day].values())
        if abs(total - 1.0) > PROPORTION_TOL:
            raise IngestError(f"{path}: proportions on {day} sum to {total:.8f}, not 1")
    return [VariantProfile(name, 0.0, days[0],
                           np.array([table[d].get(name, 0.0) for d in days]))
            for name in names]


def with_rates(profiles: list[VariantProfile], rates: dict[str, float]) -> list[VariantProfile]:
    missing = [p.name for p in profiles if p.name not in rates]
    if missing:
        raise IngestError(f"no rate given for variants {missing}")
    return [VariantProfile(p.name, rates[p.name], p.origin, p.proportions) for p in profiles]


def _write(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def write_table(path, header, rows) -> None:
    _write(path, header, rows)


def write_counts(path, series: CountSeries) -> None:
    _write(path, COUNT_HEADER, ((d.isoformat(), int(v)) for d, v in
                                zip(series.dates(), series.values)))


def write_rates(path, curve: SeverityCurve) -> None:
    days = [curve.origin + timedelta(days=i) for i in range(len(curve))]
    _write(path, RATE_HEADER, ((d.isoformat(), fmt_float(v)) for d, v in zip(days, curve.values)))


def write_variants(path, profiles: list[VariantProfile]) -> None:
    if not profiles:
        _write(path, VARIANT_HEADER, ())
        return
    origin = profiles[0].origin
    n = profiles[0].proportions.size
    rows = []
    for i in range(n):
        day = (origin + timedelta(days=i)).isoformat()
        rows += [(day, p.name, fmt_float(p.proportions[i])) for p in profiles]
    _write(path, VARIANT_HEADER, rows)


def estimate_rows(origin: date, method: str, values, clipped=None):
    values = np.asarray(values, float)
    clipped = np.zeros(values.size, bool) if clipped is None else np.asarray(clipped, bool)
    return [((origin + timedelta(days=i)).isoformat(), method, fmt_float(v), int(c))
            for i, (v, c) in enumerate(zip(values, clipped))]


def write_estimates(path, rows) -> None:
    _write(path, ESTIMATE_HEADER, rows)


def read_estimates(path) -> dict[str, SeverityCurve]:
    """Estimates by method on a daily axis; days without a row are NaN."""
    rows = _rows(path, ESTIMATE_HEADER)
    by_method: dict[str, list[tuple[date, float]]] = {}
    for n, (d, method, est, _) in rows:
        by_method.setdefault(method, []).append((_date(d, f"{path}:{n}"),
                                                 float(est) if est else np.nan))
    out = {}
    for method, items in by_method.items():
        items.sort()
        days = [d for d, _ in items]
        for a, b in zip(days, days[1:]):
            if b == a:
                raise IngestError(f"{path}: duplicate {method} estimate on {a}")
        values = np.full((days[-1] - days[0]).days + 1, np.nan)
        for d, v in items:
            values[(d - days[0]).days] = v
        out[method] = SeverityCurve(days[0], values)
    return out
