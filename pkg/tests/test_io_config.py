from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sevdeconv.config import (
    REALTIME,
    REALTIME_OFFSETS,
    RETRO_OFFSETS,
    ConfigError,
    ExperimentConfig,
    load_config,
    parse_config_text,
)
from sevdeconv.core import CountSeries, DegenerateError, SeverityCurve, discretized_gamma, expected_secondary
from sevdeconv.experiment import EvalPlan, delay_mean_scan
from sevdeconv.io import (
    IngestError,
    estimate_rows,
    read_counts,
    read_estimates,
    read_raw_counts,
    read_variants,
    with_rates,
    write_counts,
    write_estimates,
    write_variants,
)
from sevdeconv.simulate import PRESETS, build_region

D0 = date(2021, 1, 1)


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


# ingest -----------------------------------------------------------------------------------


def test_two_row_count_file(tmp_path):
    s = read_counts(write(tmp_path / "x.csv", "date,count\n2021-01-01,4\n2021-01-02,7\n"))
    assert len(s) == 2 and s.origin == D0 and s.values.tolist() == [4, 7]


def test_missing_date_named(tmp_path):
    path = write(tmp_path / "x.csv", "date,count\n2021-01-01,4\n2021-01-03,7\n")
    with pytest.raises(IngestError, match="2021-01-02"):
        read_counts(path)


@pytest.mark.parametrize("body,match", [
    ("day,count\n2021-01-01,1\n", "header"),
    ("date,count\n2021-01-01,1,2\n", "fields"),
    ("date,count\n2021-01-01,abc\n", "bad count"),
    ("date,count\n2021-01-01,1.5\n", "not an integer"),
    ("date,count\n2021-13-01,1\n", "bad date"),
    ("date,count\n2021-01-02,1\n2021-01-01,1\n", "increasing"),
    ("date,count\n2021-01-01,-3\n", "negative"),
    ("date,count\n", "no data"),
])
def test_malformed_count_files(tmp_path, body, match):
    with pytest.raises(IngestError, match=match):
        read_counts(write(tmp_path / "x.csv", body))


def test_raw_counts_allow_negatives(tmp_path):
    origin, vals = read_raw_counts(write(tmp_path / "x.csv", "date,count\n2021-01-01,-3\n"))
    assert origin == D0 and vals.tolist() == [-3]


def test_missing_file_reported(tmp_path):
    with pytest.raises(IngestError):
        read_counts(tmp_path / "absent.csv")


def test_variant_rows_must_sum_to_one(tmp_path):
    body = "date,variant,proportion\n2021-01-01,a,0.6\n2021-01-01,b,0.3\n"
    with pytest.raises(IngestError, match="sum"):
        read_variants(write(tmp_path / "v.csv", body))


def test_variant_round_trip(tmp_path):
    region = build_region(PRESETS["small"], 1, (0,))
    write_variants(tmp_path / "v.csv", region.variants)
    back = read_variants(tmp_path / "v.csv")
    assert [p.name for p in back] == [p.name for p in region.variants]
    for a, b in zip(back, region.variants):
        np.testing.assert_allclose(a.proportions, b.proportions, atol=1e-11)
    rated = with_rates(back, {p.name: p.rate for p in region.variants})
    assert [p.rate for p in rated] == [p.rate for p in region.variants]
    with pytest.raises(IngestError):
        with_rates(back, {})


@given(st.lists(st.integers(0, 10**9), min_size=1, max_size=30))
@settings(max_examples=30, deadline=None)
def test_count_round_trip(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("rt") / "c.csv"
    write_counts(path, CountSeries(D0, values))
    assert read_counts(path).values.tolist() == values


def test_estimate_round_trip_keeps_missing(tmp_path):
    rows = estimate_rows(D0, "conv", [0.1, np.nan, 0.3], [False, False, True])
    write_estimates(tmp_path / "e.csv", rows)
    text = (tmp_path / "e.csv").read_text()
    assert text.splitlines()[0] == "date,method,estimate,clipped_flag"
    assert "2021-01-03,conv,0.3,1" in text
    curve = read_estimates(tmp_path / "e.csv")["conv"]
    assert curve.origin == D0 and np.isnan(curve.values[1])


# delay scan -------------------------------------------------------------------------------------


def test_scan_recovers_exact_shift():
    rng = np.random.default_rng(2)
    x = rng.poisson(200 + 150 * np.sin(np.arange(300) / 20))
    X = CountSeries(D0, x)
    Y = CountSeries(D0 + timedelta(days=14), x[:-14])
    assert delay_mean_scan(X, Y) == 14


def test_scan_near_gamma_mean_on_noiseless_convolution():
    region = build_region(PRESETS["medium"], 0, (0,))
    delay = discretized_gamma(14, 0.9 * 14, 60)
    mom = expected_secondary(region.X, delay, SeverityCurve(region.X.origin,
                                                            np.full(len(region.X), 0.1)))
    Y = CountSeries(mom.origin, np.rint(mom.mean).astype(int))
    assert abs(delay_mean_scan(region.X, Y) - 14) <= 2


def test_scan_rejects_constant_and_short_series():
    X = CountSeries(D0, np.full(200, 5))
    with pytest.raises(DegenerateError):
        delay_mean_scan(X, CountSeries(D0, np.arange(200)))
    with pytest.raises(ValueError):
        delay_mean_scan(CountSeries(D0, np.arange(60)), CountSeries(D0, np.arange(60)))


# configuration ------------------------------------------------------------------------------------


def test_config_text_round_trip():
    cfg = ExperimentConfig(regions=("small",), setting=REALTIME, replicates=2,
                           misspec_offsets=(-1, 2), gammas=(0.5, 5.0))
    again = ExperimentConfig.from_mapping(parse_config_text(cfg.to_text()))
    assert again == cfg and again.digest() == cfg.digest()


def test_config_file_with_overrides(tmp_path):
    path = write(tmp_path / "run.cfg", "# comment\nregions = small, medium\nreplicates = 3\n"
                                       "oracle = yes\n")
    cfg = load_config(path, {"replicates": "4"})
    assert cfg.regions == ("small", "medium") and cfg.replicates == 4 and cfg.oracle is True


@pytest.mark.parametrize("text", [
    "unknown_key = 1\n",
    "replicates = many\n",
    "cadence = 0\n",
    "setting = sometimes\n",
    "regions = atlantis\n",
    "rules = min, best\n",
    "primary_file = /nonexistent.csv\nvariants_file = /nonexistent.csv\nvariant_rates = a:0.1\n",
    "just some words\n",
])
def test_bad_configs_rejected(tmp_path, text):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path / "bad.cfg", text))


def test_default_offsets_include_zero():
    assert ExperimentConfig().offsets == RETRO_OFFSETS
    assert ExperimentConfig(setting=REALTIME).offsets == REALTIME_OFFSETS
    assert ExperimentConfig(misspec_offsets=(2, -2)).offsets == (-2, 0, 2)


def test_noise_follows_setting():
    assert ExperimentConfig().noise_model == "poisson_binomial"
    assert ExperimentConfig(setting=REALTIME).noise_model == "beta_binomial"
    assert ExperimentConfig(noise="beta_binomial").noise_model == "beta_binomial"


def test_variant_rate_pairs():
    cfg = ExperimentConfig(variant_rates=("a:0.1", "b: 0.25"))
    assert cfg.rates_by_variant() == {"a": 0.1, "b": 0.25}


def test_evaluation_plan_cadence():
    idx = EvalPlan(10, 5, 7).indices(40)
    assert idx.tolist() == [10, 17, 24, 31]
    with pytest.raises(ValueError):
        EvalPlan(30, 20, 7).indices(40)
