"""Hexagonal 19-cell wrap-around network, pilot reuse colorings and user drops.

Cells are flat-top hexagons of circumradius r addressed by axial coordinates (q, s).
The 19-cell cluster is every cell within two hex steps of the origin; six lattice
translations of the cluster close it into a torus.
"""

import dataclasses
from dataclasses import dataclass

import networkx as nx
import numpy as np
from numpy.typing import NDArray

from mmimo_sim import seeding
from mmimo_sim.config import SUPPORTED_REUSE_FACTORS, NetworkScenario
from mmimo_sim.errors import ConfigurationError, SamplingError
from mmimo_sim.logging import get_logger

logger = get_logger(__name__)

MAX_TRIES_PER_USER = 10_000

_AXIAL_NEIGHBORS = ((1, 0), (1, -1), (0, -1), (-1, 0), (-1, 1), (0, 1))

# Cluster translations in axial coordinates; the first is the identity image
_WRAP_TRANSLATIONS = ((0, 0), (5, -3), (3, 2), (-2, 5), (-5, 3), (-3, -2), (2, -5))


def _hex_norm(q: int, s: int) -> int:
    return max(abs(q), abs(s), abs(q + s))


def _cluster_cells() -> list[tuple[int, int]]:
    """Axial coordinates ordered center, first tier, second tier."""
    cells = [(q, s) for q in range(-2, 3) for s in range(-2, 3) if _hex_norm(q, s) <= 2]
    return sorted(cells, key=lambda c: (_hex_norm(*c), np.arctan2(*_axial_to_xy(*c, 1.0)[::-1])))


def _axial_to_xy(q: float, s: float, radius: float) -> NDArray[np.float64]:
    return np.array([radius * 1.5 * q, radius * np.sqrt(3.0) * (s + q / 2.0)])


def _color(q: int, s: int, reuse_factor: int) -> int:
    match reuse_factor:
        case 1:
            return 0
        case 3:
            return (q - s) % 3
        case 4:
            return (q % 2) + 2 * (s % 2)
        case 7:
            return (q + 3 * s) % 7
    raise ConfigurationError(f"unsupported pilot reuse factor beta={reuse_factor}")


@dataclass(frozen=True)
class Topology:
    """Base-station layout of the wrapped 19-cell cluster."""

    bs_positions: NDArray[np.float64]  # (L, 2)
    wrap_offsets: NDArray[np.float64]  # (7, 2), row 0 is the zero vector
    cell_color: NDArray[np.int64]  # (L,)
    adjacency: nx.Graph
    cell_radius_m: float
    reuse_factor: int

    @property
    def cell_count(self) -> int:
        return len(self.bs_positions)

    def color_classes(self) -> dict[int, list[int]]:
        classes: dict[int, list[int]] = {}
        for cell, color in enumerate(self.cell_color):
            classes.setdefault(int(color), []).append(cell)
        return classes


def build_topology(scenario: NetworkScenario) -> Topology:
    """Lay out the 19 base stations, their torus images and the pilot coloring."""
    beta = scenario.reuse_factor
    if beta not in SUPPORTED_REUSE_FACTORS:
        raise ConfigurationError(f"unsupported pilot reuse factor beta={beta}")

    r = scenario.cell_radius_m
    cells = _cluster_cells()
    positions = np.array([_axial_to_xy(q, s, r) for q, s in cells])
    offsets = np.array([_axial_to_xy(q, s, r) for q, s in _WRAP_TRANSLATIONS])
    colors = np.array([_color(q, s, beta) for q, s in cells], dtype=np.int64)

    index = {cell: i for i, cell in enumerate(cells)}
    graph = nx.Graph()
    graph.add_nodes_from(range(len(cells)))
    for (q, s), i in index.items():
        for dq, ds in _AXIAL_NEIGHBORS:
            j = index.get((q + dq, s + ds))
            if j is not None:
                graph.add_edge(i, j)

    if beta > 1:
        clashes = [(u, v) for u, v in graph.edges if colors[u] == colors[v]]
        if clashes:
            raise ConfigurationError(f"coloring for beta={beta} puts equal colors on neighbors {clashes}")

    return Topology(
        bs_positions=positions,
        wrap_offsets=offsets,
        cell_color=colors,
        adjacency=graph,
        cell_radius_m=r,
        reuse_factor=beta,
    )


def wrap_distance(z: NDArray[np.float64], j: int | NDArray[np.int64], topo: Topology) -> NDArray[np.float64]:
    """Distance from point(s) `z` to base station(s) `j`, minimized over the 7 torus images.

    `z` has shape (..., 2) and broadcasts against `j`.
    """
    bs = topo.bs_positions[j]
    diff = np.asarray(z)[..., None, :] - (bs[..., None, :] + topo.wrap_offsets)
    return np.min(np.linalg.norm(diff, axis=-1), axis=-1)


def inside_hexagon(offset: NDArray[np.float64], radius: float) -> NDArray[np.bool_]:
    """True for offsets (relative to a cell center) inside the flat-top hexagon."""
    x = np.abs(offset[..., 0])
    y = np.abs(offset[..., 1])
    half_height = np.sqrt(3.0) * radius / 2.0
    return (y <= half_height) & (np.sqrt(3.0) * x + y <= np.sqrt(3.0) * radius)


@dataclass(frozen=True)
class UserDrop:
    """User positions, large-scale gains and pilot assignment for one drop.

    Arrays are read-only after construction.
    """

    positions: NDArray[np.float64]  # (L, K, 2)
    gains: NDArray[np.float64]  # (J, L, K): d_j(z_lk), linear
    shadow: NDArray[np.float64]  # (L, K) per user or (J, L, K) per link
    pilot_index: NDArray[np.int64]  # (L, K), 0-based
    active: NDArray[np.bool_]  # (L, K)

    def __post_init__(self) -> None:
        for field in dataclasses.fields(self):
            value = np.array(getattr(self, field.name), copy=True)
            value.setflags(write=False)
            object.__setattr__(self, field.name, value)

    @property
    def cells(self) -> int:
        return self.gains.shape[1]

    @property
    def users_per_cell(self) -> int:
        return self.gains.shape[2]

    @property
    def serving_gains(self) -> NDArray[np.float64]:
        """d_l(z_lk) for every user, shape (L, K)."""
        cells = np.arange(self.cells)
        return self.gains[cells, cells]


def _sample_offsets(rng: np.random.Generator, count: int, radius: float, min_distance: float) -> NDArray[np.float64]:
    """Uniform points in a hexagon centered at the origin, at least `min_distance` from it."""
    half_height = np.sqrt(3.0) * radius / 2.0
    points = np.empty((count, 2))
    for n in range(count):
        for _ in range(MAX_TRIES_PER_USER):
            candidate = np.array([rng.uniform(-radius, radius), rng.uniform(-half_height, half_height)])
            if inside_hexagon(candidate, radius) and np.hypot(*candidate) >= min_distance:
                points[n] = candidate
                break
        else:
            raise SamplingError(f"no valid position after {MAX_TRIES_PER_USER} tries")
    return points


def drop_users(scenario: NetworkScenario, topo: Topology, rng_seed: int) -> UserDrop:
    """Place K users uniformly in every cell and compute their gains to all BSs."""
    rng = seeding.stream(rng_seed, seeding.DROP)
    L = topo.cell_count
    K = scenario.users_per_cell
    r = scenario.cell_radius_m

    positions = np.stack(
        [
            topo.bs_positions[l] + _sample_offsets(rng, K, r, scenario.min_distance_fraction * r)
            for l in range(L)
        ]
    )

    sigma_db = np.sqrt(scenario.shadow_variance_db)
    shadow_shape = (L, L, K) if scenario.shadow_per_link else (L, K)
    shadow = 10.0 ** (sigma_db * rng.standard_normal(shadow_shape) / 10.0)

    # distances[j, l, k] from BS j to user (l, k)
    distances = wrap_distance(positions[None, :, :, :], np.arange(L)[:, None, None], topo)
    gains = shadow / distances**scenario.pathloss_exponent

    pilot_index = np.empty((L, K), dtype=np.int64)
    for l in range(L):
        block = topo.cell_color[l] * K
        pilot_index[l] = block + rng.permutation(K)

    logger.info(
        "drop_built",
        seed=rng_seed,
        cells=L,
        users_per_cell=K,
        min_serving_distance=float(np.min(distances[np.arange(L), np.arange(L)])),
    )
    return UserDrop(
        positions=positions,
        gains=gains,
        shadow=shadow,
        pilot_index=pilot_index,
        active=np.ones((L, K), dtype=bool),
    )


def apply_coverage_drop(drop: UserDrop, n_drop: int) -> UserDrop:
    """Deactivate the `n_drop` users with the weakest serving-link gain."""
    total = drop.active.size
    if not 0 <= n_drop < total:
        raise ConfigurationError(f"cannot drop {n_drop} of {total} users")
    if n_drop == 0:
        return drop

    weakest = np.argsort(drop.serving_gains, axis=None, kind="stable")[:n_drop]
    active = np.array(drop.active)
    active.flat[weakest] = False
    logger.info("coverage_drop_applied", dropped=n_drop, active=int(active.sum()))
    return dataclasses.replace(drop, active=active)
