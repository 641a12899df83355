import pytest

from pdectrl.numerics import Grid

ACCEPTANCE_LINES = []


@pytest.fixture
def grid():
    return Grid(101)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
