import sys

import numpy as np
import pytest

from wavefield.coregeo import ArrayGeometry, FrequencyGrid
from wavefield.dictionary import build_free_field, build_rigid_sphere, em32_sphere, equiangular_grid
from wavefield.stft import StftConfig

SQUARE_4CM = np.array([[0.02, 0.02, 0.0], [-0.02, 0.02, 0.0], [-0.02, -0.02, 0.0], [0.02, -0.02, 0.0]])


@pytest.fixture(scope="session")
def freqs():
    return FrequencyGrid(16000.0, 1024)


@pytest.fixture(scope="session")
def stft_cfg():
    return StftConfig()


@pytest.fixture(scope="session")
def grid():
    return equiangular_grid()


@pytest.fixture(scope="session")
def em32():
    return em32_sphere()


@pytest.fixture(scope="session")
def em32_dict(em32, grid, freqs):
    return build_rigid_sphere(em32, grid, freqs, name="em32", jobs=4)


@pytest.fixture(scope="session")
def square_dict(grid, freqs):
    return build_free_field(ArrayGeometry(SQUARE_4CM), grid, freqs, name="square")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in results:
        terminalreporter.write_line(line)
