"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

import pytest

_RESULTS: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call" and not (call.when == "setup" and call.excinfo):
        return
    number, title = marker.args
    passed = call.excinfo is None
    previous = _RESULTS.get(number)
    # a criterion split over several tests passes only if every part passes
    if previous is None or previous[0] == "PASS":
        _RESULTS[number] = ("PASS" if passed else "FAIL", title)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        status, title = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {title}")
