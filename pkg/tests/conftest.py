from datetime import date, timedelta

import numpy as np
import pytest

from sevdeconv.core import ConvolutionOperator, CountSeries, DelayDistribution

ORIGIN = date(2021, 1, 1)
_CRITERIA: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    """Store a one-line acceptance verdict, printed in the terminal summary."""
    _CRITERIA[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'} | {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])


def random_instance(rng, n_y, d, *, low=20, high=200, rate=None):
    """Random primary counts, delay and Poisson secondary counts on aligned axes."""
    x = rng.integers(low, high, n_y + d)
    delay = DelayDistribution(rng.dirichlet(np.ones(d + 1)))
    X = CountSeries(ORIGIN, x)
    y_origin = ORIGIN + timedelta(days=d)
    A = ConvolutionOperator(X, delay, y_origin, n_y)
    if rate is None:
        rate = np.clip(0.3 + 0.1 * np.sin(np.arange(n_y + d) / 3), 0, 1)
    Y = CountSeries(y_origin, rng.poisson(A.matvec(rate)))
    return X, Y, delay


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
