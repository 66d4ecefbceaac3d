"""Shared pytest wiring: acceptance criteria verdict lines.

Tests named test_acceptance_NN_* report one "[ACCEPTANCE n] PASS/FAIL"
line each in the terminal summary, so the verdicts survive output capture
and appear in any pytest invocation that ran them.
"""

import re

_ACCEPTANCE_RE = re.compile(r"test_acceptance_0*(\d+)")
_results = {}


def pytest_runtest_logreport(report):
    match = _ACCEPTANCE_RE.search(report.nodeid)
    if not match:
        return
    n = int(match.group(1))
    if report.when == "call":
        _results[n] = report.outcome
    elif report.outcome not in ("passed",):
        # setup error or skip counts as a failure to demonstrate the criterion
        _results.setdefault(n, report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.ensure_newline()
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        verdict = "PASS" if _results[n] == "passed" else "FAIL"
        terminalreporter.write_line(f"[ACCEPTANCE {n}] {verdict}")
