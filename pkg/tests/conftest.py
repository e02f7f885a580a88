import numpy as np
import pytest

from cbflow.mesh import Grid

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def thin16():
    return Grid((16, 16, 1, 1))


def pytest_terminal_summary(terminalreporter):
    # pass/fail lines of the acceptance criteria, shown even when output is captured
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
