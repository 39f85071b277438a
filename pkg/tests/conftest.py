import os
import sys

import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

from marlin.gridworld import load_builtin  # noqa: E402
from marlin.negotiation import OracleBackend  # noqa: E402


@pytest.fixture
def single_slot():
    return load_builtin("single_slot")


@pytest.fixture
def oracle_pair():
    return [OracleBackend(), OracleBackend()]


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def acceptance_report():
    """Record one summary line per acceptance criterion; printed at the end of the run."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
