import os

import pytest

# outcome lines recorded by tests/test_acceptance.py, printed after the run
ACCEPTANCE_LINES: dict = {}


@pytest.fixture
def acceptance():
    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
    missing = [k for k in range(1, 15) if k not in ACCEPTANCE_LINES]
    if missing and os.environ.get("BRWRE_ACCEPTANCE_FULL"):
        terminalreporter.write_line(f"criteria not run: {missing}")
