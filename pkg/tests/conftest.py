"""Shared fixtures and toy-network builders."""

import numpy as np
import pytest

from mmimo_sim.channel import PowerProfile
from mmimo_sim.config import LinkParams, NetworkScenario
from mmimo_sim.topology import UserDrop


def make_drop(gains, pilot_index, active=None) -> UserDrop:
    """UserDrop from explicit gains (J, L, K) and pilot indices (L, K); positions are unused."""
    gains = np.asarray(gains, dtype=float)
    pilot_index = np.asarray(pilot_index, dtype=np.int64)
    L, K = pilot_index.shape
    return UserDrop(
        positions=np.zeros((L, K, 2)),
        gains=gains,
        shadow=np.ones((L, K)),
        pilot_index=pilot_index,
        active=np.ones((L, K), dtype=bool) if active is None else np.asarray(active, dtype=bool),
    )


def uniform_powers(drop: UserDrop, pilot: float = 1.0, ul: float = 1.0, dl: float = 1.0) -> PowerProfile:
    shape = drop.pilot_index.shape
    return PowerProfile(pilot=np.full(shape, pilot), ul=np.full(shape, ul), dl=np.full(shape, dl))


def random_drop(rng: np.random.Generator, cells: int, users: int, pilots: int) -> UserDrop:
    """Toy drop with strong serving links, weak cross links and random pilots."""
    gains = rng.uniform(0.05, 0.3, size=(cells, cells, users))
    for l in range(cells):
        gains[l, l] = rng.uniform(0.5, 1.5, size=users)
    pilot_index = np.stack([rng.choice(pilots, size=users, replace=False) for _ in range(cells)])
    return make_drop(gains, pilot_index)


@pytest.fixture(scope="module")
def two_cell_drop() -> UserDrop:
    """Two cells, two users each, full pilot reuse (B = 2)."""
    gains = [
        [[1.0, 0.4], [0.1, 0.05]],
        [[0.08, 0.2], [0.9, 0.5]],
    ]
    return make_drop(gains, [[0, 1], [1, 0]])


@pytest.fixture(scope="module")
def two_cell_link() -> LinkParams:
    return LinkParams(antennas=16, pilot_length=2)


@pytest.fixture(scope="module")
def small_scenario() -> NetworkScenario:
    """19 cells with two users each and one pilot pair reused everywhere."""
    return NetworkScenario(K=2, beta=1, M=8)
