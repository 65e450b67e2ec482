"""Counter-based random streams.

Every random draw in the simulator comes from a stream keyed by (seed, purpose, counters...),
so a realization's samples do not depend on which worker produced it or in what order.
"""

import numpy as np

# Stream purposes
DROP = 0
CHANNEL = 1
PILOT_NOISE = 2
GAMMA = 3


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for `seed` and a tuple of non-negative counters."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key)))


def job_seed(master: int, drop_index: int, users_per_cell: int, reuse_factor: int) -> int:
    """Seed shared by every M and every scheme evaluated on one user drop."""
    state = np.random.SeedSequence([master, drop_index, users_per_cell, reuse_factor]).generate_state(1)
    return int(state[0])


def derived(seed: int, purpose: int) -> int:
    """Seed of an auxiliary run (e.g. the gamma trials) that must not reuse `seed`'s streams."""
    return int(np.random.SeedSequence([seed, purpose]).generate_state(1)[0])
