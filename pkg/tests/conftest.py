import numpy as np
import pytest

from tlsseg.scan_io import ScanStation


def make_station(xyz, station_id="s00", origin=(0.0, 0.0, 0.0), rotation=None, intensity=None):
    xyz = np.asarray(xyz, dtype=float).reshape(-1, 3)
    if intensity is None:
        intensity = np.full(len(xyz), 0.5)
    return ScanStation(station_id, np.asarray(origin, float), np.eye(3) if rotation is None else rotation, xyz, intensity)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance summary

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and not report.failed):
        return
    number, title = marker.args
    entry = item.config._criteria.setdefault(number, {"title": title, "passed": True, "ran": False})
    entry["ran"] = entry["ran"] or report.when == "call"
    if report.failed:
        entry["passed"] = False


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    criteria = getattr(config, "_criteria", {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(criteria):
        entry = criteria[number]
        status = "PASS" if entry["passed"] and entry["ran"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {entry['title']}")
