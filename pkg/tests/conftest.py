import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_line():
    """Record one 'PASS/FAIL criterion N: ...' line for the end-of-run summary."""

    def record(number: int, name: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append((number, f"{'PASS' if passed else 'FAIL'} criterion {number:>2} {name}: {detail}"))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
