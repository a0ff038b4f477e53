"""Shared pytest plumbing.

The acceptance tests record one [PASS]/[FAIL] line each, with the
measured value next to its tolerance; those lines are echoed as a
section in the terminal summary so the verdict survives output capture.
"""

import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record a criterion verdict, then enforce it."""

    def record(name: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
