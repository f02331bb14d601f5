import numpy as np
import pytest

from cropafa.cgm import load_params
from cropafa.env import NormalizationStats, calibrate_normalization, make_scenario
from cropafa.weather import synthetic_year_set

from helpers import ACCEPTANCE_RESULTS


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def params():
    return load_params()


@pytest.fixture(scope="session")
def years():
    return synthetic_year_set(range(1990, 1996), prefix="normal-")


@pytest.fixture(scope="session")
def cold_years():
    return synthetic_year_set(range(1990, 1996), "cold", prefix="cold-")


@pytest.fixture(scope="session")
def stats(years):
    return calibrate_normalization(make_scenario("realistic"), years, 5, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def identity_stats():
    return NormalizationStats.identity()
