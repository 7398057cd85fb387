import numpy as np
import pytest

from potmfg.inviscid import hjb_solve
from potmfg.model import builtin_example_d2
from potmfg.simplex import SimplexGrid


@pytest.fixture(scope="session")
def d2_model():
    return builtin_example_d2(3.0)


@pytest.fixture(scope="session")
def d2_grid():
    return SimplexGrid(2, 1 / 100)


@pytest.fixture(scope="session")
def d2_value(d2_model, d2_grid):
    return hjb_solve(d2_model, d2_grid)


def simplex_point(m: float) -> np.ndarray:
    """Two-state distribution with magnetisation ``m = p_1 - p_2``."""
    return np.array([(1 + m) / 2, (1 - m) / 2])


ACCEPTANCE_LINES: list = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    """Print and remember one PASS/FAIL line for the acceptance summary."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} | {detail}"
    print(line)
    ACCEPTANCE_LINES.append((number, line))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES, key=lambda item: item[0]):
            terminalreporter.write_line(line)
