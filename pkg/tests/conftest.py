"""Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

import re

_CRITERIA = {}
_NAME = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_")


def pytest_runtest_logreport(report):
    match = _NAME.search(report.nodeid)
    if not match:
        return
    if report.when != "call" and report.passed:
        return
    num = int(match.group(1))
    detail = dict(report.user_properties).get("detail", "")
    if report.skipped:
        outcome = "SKIP"
    else:
        outcome = "PASS" if report.passed else "FAIL"
    if _CRITERIA.get(num, ("PASS",))[0] == "PASS" or outcome == "FAIL":
        _CRITERIA[num] = (outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        outcome, detail = _CRITERIA[num]
        terminalreporter.write_line(f"criterion {num:2d}: {outcome}  {detail}".rstrip())
