"""Shared pytest hooks: per-criterion pass/fail lines for the acceptance suite."""

import pytest

_results: dict[tuple[int, str], list[bool]] = {}
acceptance_notes: dict[int, list[str]] = {}


def note(criterion: int, line: str) -> None:
    """Attach a report line to a criterion, shown in the terminal summary."""
    acceptance_notes.setdefault(criterion, []).append(line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call":
        return
    marker = item.get_closest_marker("criterion")
    if marker:
        number, name = marker.args
        _results.setdefault((number, name), []).append(report.passed)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for (number, name), outcomes in sorted(_results.items()):
        status = "PASS" if all(outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} ({name}): {status}")
        for line in acceptance_notes.get(number, []):
            terminalreporter.write_line(f"    {line}")
