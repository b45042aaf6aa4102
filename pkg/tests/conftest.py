import numpy as np
import pytest

from scoreflow.field import Boundary, Grid2


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def periodic_grid():
    return Grid2(16, 12, 1.0, 1.0, Boundary.PERIODIC)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
