from __future__ import annotations

import pytest

ACCEPTANCE: list[str] = []


@pytest.fixture
def record():
    """Log one acceptance line; the lines are repeated in the terminal summary."""

    def _record(number: int, name: str, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {name}: {detail}"
        ACCEPTANCE.append(line)
        print(line)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
