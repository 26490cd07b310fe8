import numpy as np
import pytest

from kdlab import BlackHole
from kdlab.operators import Grid2D


@pytest.fixture
def bh():
    return BlackHole(1.0, 0.5, 0.3)


@pytest.fixture
def bh_rot():
    return BlackHole(1.0, 0.6, 0.2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_grid(bh_rot):
    return Grid2D(bh_rot, X=20.0, n_x=64, n_theta=16)


def random_field(grid, rng, support=0.5):
    """Random complex field vanishing outside |x| < support * X."""
    psi = rng.normal(size=grid.shape) + 1j * rng.normal(size=grid.shape)
    psi[np.abs(grid.x) >= support * grid.X] = 0.0
    return psi
