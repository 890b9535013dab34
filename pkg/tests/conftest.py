import numpy as np
import pytest

from nlsstab.grid import Grid
from nlsstab.hamiltonian import build_potential
from nlsstab.manifold import build_branch
from nlsstab import nonlinearity as nl

WELL = {"depth": 1.0, "width": 1.5}


@pytest.fixture(scope="session")
def small_grid():
    return Grid(64, 12.0)


@pytest.fixture(scope="session")
def small_H(small_grid):
    return build_potential("gaussian-well", WELL, small_grid)


@pytest.fixture(scope="session")
def cubic_branch(small_H):
    return build_branch(small_H, nl.cubic(), a_max=0.3, a_min=1e-4, ratio=1.3)


@pytest.fixture(scope="session")
def sub_branch(small_H):
    return build_branch(small_H, nl.power(0.6), a_max=0.2, a_min=1e-4, ratio=1.3)


def packet(grid, x0=1.0, y0=-0.5, width=1.0, k=(0.0, 0.0), phase=0.3):
    return np.exp(-((grid.X - x0) ** 2 + (grid.Y - y0) ** 2) / (2 * width**2)
                  + 1j * (k[0] * grid.X + k[1] * grid.Y + phase))


ACCEPT_KEY = pytest.StashKey[dict]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPT_KEY, None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
