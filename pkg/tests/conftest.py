"""Collects acceptance outcomes and prints one line per criterion at the end."""

from __future__ import annotations

import pytest

_TITLES: dict[int, str] = {}
_OUTCOMES: dict[int, list[str]] = {}


def pytest_collection_modifyitems(config, items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker:
            _TITLES.setdefault(marker.args[0], marker.args[1])


def pytest_deselected(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker:
            _TITLES.setdefault(marker.args[0], marker.args[1])


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if not marker:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        state = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        _OUTCOMES.setdefault(marker.args[0], []).append(state)


def pytest_terminal_summary(terminalreporter):
    if not _TITLES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_TITLES):
        states = _OUTCOMES.get(number)
        if not states:
            verdict = "NOT RUN (deselected)"
        elif "FAIL" in states:
            verdict = "FAIL"
        elif all(s == "SKIP" for s in states):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        terminalreporter.write_line(f"criterion {number}: {verdict} - {_TITLES[number]}")
