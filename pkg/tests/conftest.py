"""Collects one verdict line per acceptance criterion and prints them after the run."""

import pytest

VERDICTS: dict[int, str] = {}


@pytest.fixture
def verdict():
    """Call ``verdict(n, ok, detail)`` once per criterion; prints and records the line."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        VERDICTS[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[number])
