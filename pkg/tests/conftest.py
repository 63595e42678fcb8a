"""Shared pytest plumbing: one summary line per numbered acceptance criterion.

Tests marked `@pytest.mark.criterion(n)` get a `criterion n: PASS/FAIL` line
in the terminal summary. Tests can attach measured numbers to that line via
`record_detail`.
"""

import pytest

_outcomes: dict[int, list[bool]] = {}
_details: dict[int, str] = {}


def record_detail(number: int, text: str) -> None:
    _details[number] = text


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number = int(marker.args[0])
    if report.failed:
        _outcomes.setdefault(number, []).append(False)
    elif report.when == "call" and report.passed:
        _outcomes.setdefault(number, []).append(True)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _outcomes:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for number in sorted(_outcomes):
        verdict = "PASS" if all(_outcomes[number]) else "FAIL"
        detail = _details.get(number)
        suffix = f"  ({detail})" if detail else ""
        terminalreporter.write_line(f"criterion {number}: {verdict}{suffix}")
