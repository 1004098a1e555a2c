"""Collects results of tests marked ``acceptance`` and prints one line per criterion."""

import pytest

_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or report.when == "teardown" or (report.when == "setup" and report.passed):
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if not report.passed:
        detail = report.longreprtext.strip().splitlines()[-1] if report.longreprtext else "failed"
    _results[number] = (title, "PASS" if report.passed else "FAIL", report.duration, detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        title, status, duration, detail = _results[number]
        line = f"criterion {number:2d}: {status}  {title}  [{duration:.1f}s]"
        terminalreporter.write_line(f"{line}  {detail}" if detail else line)
