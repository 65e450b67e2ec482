"""Tests for the wrapped hexagonal layout, pilot colorings and user drops."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmimo_sim.config import NetworkScenario
from mmimo_sim.errors import ConfigurationError
from mmimo_sim.topology import (
    apply_coverage_drop,
    build_topology,
    drop_users,
    inside_hexagon,
    wrap_distance,
)


@pytest.fixture(scope="module")
def topology():
    return build_topology(NetworkScenario(beta=4, radius_m=1.0))


@pytest.fixture(scope="module")
def drop(small_scenario):
    return drop_users(small_scenario, build_topology(small_scenario), rng_seed=11)


def test_cluster_layout(topology):
    """Test that the center cell is at the origin and the first tier at sqrt(3) r."""
    assert topology.cell_count == 19
    np.testing.assert_allclose(topology.bs_positions[0], [0.0, 0.0])
    radii = np.linalg.norm(topology.bs_positions, axis=1)
    np.testing.assert_allclose(radii[1:7], np.sqrt(3.0))
    assert np.all(radii[7:] > np.sqrt(3.0) + 1e-9)
    assert topology.adjacency.number_of_nodes() == 19
    assert topology.adjacency.number_of_edges() == 42


def test_wraparound_gives_every_cell_six_neighbors(topology):
    """Test that on the torus every base station has six others at distance sqrt(3) r."""
    L = topology.cell_count
    distances = wrap_distance(topology.bs_positions[:, None, :], np.arange(L)[None, :], topology)
    np.testing.assert_allclose(np.diag(distances), 0.0, atol=1e-12)
    neighbors = np.isclose(distances, np.sqrt(3.0))
    assert np.all(neighbors.sum(axis=1) == 6)
    assert np.all(distances[~np.eye(L, dtype=bool)] >= np.sqrt(3.0) - 1e-9)


@pytest.mark.parametrize("beta", [1, 3, 4, 7])
def test_colorings(beta):
    """Test that every reuse factor uses beta colors with no equal-colored neighbors."""
    topo = build_topology(NetworkScenario(beta=beta))
    assert set(np.unique(topo.cell_color)) == set(range(beta))
    if beta > 1:
        assert all(topo.cell_color[u] != topo.cell_color[v] for u, v in topo.adjacency.edges)


def test_beta_three_class_sizes():
    classes = build_topology(NetworkScenario(beta=3)).color_classes()
    assert sorted(len(cells) for cells in classes.values()) == [6, 6, 7]


@settings(max_examples=50, deadline=None)
@given(
    x=st.floats(min_value=-5.0, max_value=5.0),
    y=st.floats(min_value=-5.0, max_value=5.0),
    j=st.integers(min_value=0, max_value=18),
)
def test_wrap_distance_never_exceeds_direct_distance(topology, x, y, j):
    z = np.array([x, y])
    assert wrap_distance(z, j, topology) <= np.linalg.norm(z - topology.bs_positions[j]) + 1e-12


def test_inside_hexagon():
    points = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.86], [0.0, 0.9], [1.01, 0.0], [0.75, 0.43]])
    np.testing.assert_array_equal(inside_hexagon(points, 1.0), [True, True, True, False, False, True])


def test_drop_shapes_and_geometry(small_scenario, drop):
    """Test that users lie in their own hexagon outside the exclusion radius."""
    topo = build_topology(small_scenario)
    L, K = 19, small_scenario.users_per_cell
    assert drop.positions.shape == (L, K, 2)
    assert drop.gains.shape == (L, L, K)
    assert drop.shadow.shape == (L, K)
    assert drop.active.all()

    offsets = drop.positions - topo.bs_positions[:, None, :]
    r = small_scenario.cell_radius_m
    assert inside_hexagon(offsets, r).all()
    assert np.all(np.linalg.norm(offsets, axis=-1) >= small_scenario.min_distance_fraction * r)


def test_pilots_follow_cell_colors():
    scenario = NetworkScenario(K=3, beta=4, M=8)
    topo = build_topology(scenario)
    drop = drop_users(scenario, topo, rng_seed=5)
    for l in range(19):
        block = topo.cell_color[l] * 3
        assert sorted(drop.pilot_index[l]) == [block, block + 1, block + 2]


def test_gains_without_shadowing_follow_pathloss():
    scenario = NetworkScenario(K=2, beta=1, M=8, shadow_var_db=0.0)
    topo = build_topology(scenario)
    drop = drop_users(scenario, topo, rng_seed=3)
    np.testing.assert_allclose(drop.shadow, 1.0)
    cells = np.arange(19)
    serving = np.linalg.norm(drop.positions - topo.bs_positions[:, None, :], axis=-1)
    np.testing.assert_allclose(drop.gains[cells, cells], serving ** -scenario.pathloss_exponent, rtol=1e-12)


def test_per_link_shadowing_shape():
    scenario = NetworkScenario(K=2, beta=1, M=8, shadow_per_link=True)
    drop = drop_users(scenario, build_topology(scenario), rng_seed=3)
    assert drop.shadow.shape == (19, 19, 2)


def test_drops_are_deterministic(small_scenario, drop):
    topo = build_topology(small_scenario)
    again = drop_users(small_scenario, topo, rng_seed=11)
    other = drop_users(small_scenario, topo, rng_seed=12)
    np.testing.assert_array_equal(again.gains, drop.gains)
    np.testing.assert_array_equal(again.pilot_index, drop.pilot_index)
    assert not np.array_equal(other.positions, drop.positions)


def test_drop_arrays_are_read_only(drop):
    with pytest.raises(ValueError):
        drop.gains[0, 0, 0] = 1.0


def test_coverage_drop_removes_weakest_users(drop):
    reduced = apply_coverage_drop(drop, 5)
    assert reduced.active.sum() == drop.active.size - 5
    served = drop.serving_gains
    assert served[~reduced.active].max() <= served[reduced.active].min()
    assert apply_coverage_drop(drop, 0) is drop


@pytest.mark.parametrize("n_drop", [-1, 38])
def test_coverage_drop_bounds(drop, n_drop):
    with pytest.raises(ConfigurationError):
        apply_coverage_drop(drop, n_drop)


def test_shadowing_statistics():
    """Test the dB mean and variance of 10^5 log-normal shadowing draws."""
    scenario = NetworkScenario(K=300, beta=1, M=8, shadow_per_link=True)
    drop = drop_users(scenario, build_topology(scenario), rng_seed=5)
    shadow_db = 10.0 * np.log10(drop.shadow).ravel()
    assert shadow_db.size >= 100_000
    assert abs(np.mean(shadow_db)) < 0.03
    assert np.var(shadow_db) == pytest.approx(scenario.shadow_variance_db, rel=0.02)
