import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_REPORT = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")
    config.stash[_REPORT] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    item.config.stash[_REPORT][number] = (title, report.passed)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_REPORT, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, passed = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {title}")
