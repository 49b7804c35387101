import numpy as np
import pytest
from hypothesis import settings

from stochfactor.paths import TimeGrid, simulate_brownian

settings.register_profile("default", max_examples=30, deadline=None)
settings.load_profile("default")

SEED = 7


@pytest.fixture(scope="session")
def grid256():
    return TimeGrid(1.0, 256)


@pytest.fixture(scope="session")
def brownian_1e5(grid256):
    """Shared reference ensemble: M = 1e5, N = 256, T = 1."""
    return simulate_brownian(grid256, 100_000, SEED)


@pytest.fixture(scope="session")
def brownian_small():
    return simulate_brownian(TimeGrid(1.0, 64), 20_000, SEED)


def within(est, target, se, k=4.0, extra=0.0):
    return abs(est - target) <= k * se + extra
