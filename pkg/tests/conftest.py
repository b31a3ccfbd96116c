import sys
from pathlib import Path

import pytest

# make the sibling ``oracles`` module importable from every test file
sys.path.insert(0, str(Path(__file__).parent))

_RESULTS = pytest.StashKey()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")
    config.stash[_RESULTS] = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call":
        return
    number, title = mark.args
    detail = dict(report.user_properties).get("detail", "")
    verdict = "PASS" if report.passed else "FAIL"
    item.config.stash[_RESULTS].append((number, f"criterion {number:>2} {verdict}  {title}  {detail}".rstrip()))


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, [])
    if results:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(results):
            terminalreporter.write_line(line)
