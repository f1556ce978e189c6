"""Shared pytest plumbing.

The acceptance tests record one PASS/FAIL line each; they are echoed in a
dedicated terminal section at the end of the run so the verdicts survive
output capturing.
"""

from __future__ import annotations

ACCEPTANCE_LINES: list = []


def record_criterion(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
