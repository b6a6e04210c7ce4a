"""Collects acceptance outcomes and prints one PASS/FAIL line per criterion."""
import re

_OUTCOMES: dict[int, str] = {}
DETAILS: dict[int, str] = {}

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


def pytest_runtest_logreport(report):
    match = _CRITERION.search(report.nodeid)
    if not match:
        return
    n = int(match.group(1))
    if report.when == "call" or (report.when == "setup" and not report.passed):
        if report.skipped:
            _OUTCOMES[n] = "SKIP"
        else:
            _OUTCOMES[n] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _OUTCOMES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_OUTCOMES):
        detail = DETAILS.get(n, "")
        terminalreporter.write_line(f"criterion {n}: {_OUTCOMES[n]}" + (f"  ({detail})" if detail else ""))
