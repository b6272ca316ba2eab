import numpy as np
import pytest

from gentrimil.geodata import GeoCoordinate, TractPolygon


def square(tract_id, lat0, lon0, size=0.01):
    ring = (GeoCoordinate(lat0, lon0), GeoCoordinate(lat0, lon0 + size),
            GeoCoordinate(lat0 + size, lon0 + size), GeoCoordinate(lat0 + size, lon0),
            GeoCoordinate(lat0, lon0))
    return TractPolygon(tract_id, ring)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance reporting ----------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (report.when != "call" and report.passed):
        return
    n = mark.args[0]
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if report.when == "call" or n not in _CRITERIA:
        _CRITERIA[n] = ("PASS" if report.passed else "FAIL", detail or report.when)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
