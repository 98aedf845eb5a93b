import numpy as np
import pandas as pd
import pytest

from loadcast.core import Dataset, HourlySeries, TimePoint
from loadcast.io import SyntheticSpec, gen_synthetic


def series(values, start="2004-01-01", name="x", freq_hours=1):
    return HourlySeries(TimePoint.from_timestamp(pd.Timestamp(start)), np.asarray(values, float), name, freq_hours)


def days_index(n_days, start="2004-01-01"):
    return pd.date_range(start, periods=24 * n_days, freq="h")


@pytest.fixture(scope="session")
def small_synth():
    """Two years, two stations: big enough to train, small enough to be quick."""
    spec = SyntheticSpec(years=2, start_year=2004, n_stations=2, n_noise_features=1, rng_seed=3)
    return gen_synthetic(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ------------------------------------------------ acceptance criteria report

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): test belongs to acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    n, title = mark.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "tests": 0})
    if rep.when == "call":
        entry["tests"] += 1
    if rep.failed or rep.skipped:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["ok"] and e["tests"] else "FAIL"
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {e['title']}")
