"""Tests for the resolvent fixed point and the large-scale SINR approximations."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from mmimo_sim.channel import PowerProfile, compute_estimation_statistics
from mmimo_sim.config import LinkParams
from mmimo_sim.deteq import (
    deteq_se_report,
    dl_sinr_approx,
    gamma_approx,
    solve_theorem1,
    solve_theorem2,
    ul_sinr_approx,
)
from mmimo_sim.errors import NonConvergenceError
from mmimo_sim.filters import Scheme
from mmimo_sim.montecarlo import mc_report
from tests.conftest import make_drop, random_drop, uniform_powers

GOLDEN = 0.6180339887


def test_equal_descriptors_give_the_golden_ratio():
    """Test that R_b = I with M = B = 8 and rho = 1 solves delta^2 + delta - 1 = 0."""
    scalar = solve_theorem1(np.ones(8), 1.0, antennas=8)
    np.testing.assert_allclose(scalar.delta, GOLDEN, atol=1e-10)
    assert scalar.normalized_trace == pytest.approx(GOLDEN, abs=1e-10)

    matrix = solve_theorem1(np.stack([np.eye(8)] * 8), 1.0)
    np.testing.assert_allclose(matrix.delta, GOLDEN, atol=1e-10)
    assert matrix.normalized_trace == pytest.approx(GOLDEN, abs=1e-10)


def test_residual_history_decreases():
    result = solve_theorem1(np.ones(8), 1.0, antennas=8)
    assert result.residual < 1e-12
    assert len(result.history) == result.iterations
    tail = result.history[-10:]
    assert np.all(np.diff(tail) < 0)


def test_single_descriptor_matches_root_finder():
    c, M, rho = 2.0, 4, 0.5
    expected = brentq(lambda delta: delta - c / (c / (M * (1.0 + delta)) + rho), 0.0, c / rho)
    result = solve_theorem1(np.array([c]), rho, antennas=M)
    assert result.delta[0] == pytest.approx(expected, rel=1e-10)


def test_zero_descriptors():
    result = solve_theorem1(np.zeros(3), 0.25, antennas=5)
    np.testing.assert_array_equal(result.delta, 0.0)
    assert result.T == pytest.approx(4.0)


def test_invalid_arguments_and_iteration_cap():
    with pytest.raises(ValueError):
        solve_theorem1(np.ones(2), 0.0, antennas=2)
    with pytest.raises(ValueError):
        solve_theorem1(np.ones(2), 1.0)
    with pytest.raises(NonConvergenceError):
        solve_theorem1(np.ones(8), 1.0, antennas=8, max_iter=2)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**32 - 1))
def test_scalar_and_matrix_paths_agree(seed):
    """Test that c_b I_M descriptors give the same delta and T' on both code paths."""
    rng = np.random.default_rng(seed)
    M, B = 6, 4
    c = rng.uniform(0.1, 3.0, size=B)
    rho = rng.uniform(0.1, 1.0)
    theta = rng.uniform(0.5, 2.0)
    matrices = c[:, None, None] * np.eye(M)

    scalar = solve_theorem1(c, rho, antennas=M)
    matrix = solve_theorem1(matrices, rho)
    np.testing.assert_allclose(scalar.delta, matrix.delta, rtol=1e-10)
    assert scalar.normalized_trace == pytest.approx(matrix.normalized_trace, rel=1e-10)

    d_scalar = solve_theorem2(c, theta, rho, antennas=M)
    d_matrix = solve_theorem2(matrices, theta, rho)
    np.testing.assert_allclose(d_scalar.delta_prime, d_matrix.delta_prime, rtol=1e-9)
    assert d_scalar.normalized_trace == pytest.approx(d_matrix.normalized_trace, rel=1e-9)


def test_derivative_edge_cases():
    zero = solve_theorem2(np.ones(3), 0.0, 0.5, antennas=4)
    np.testing.assert_allclose(zero.delta_prime, 0.0, atol=1e-15)
    assert zero.T_prime == pytest.approx(0.0, abs=1e-15)

    empty = solve_theorem2(np.zeros(2), 1.0, 0.5, antennas=4)
    assert empty.T_prime == pytest.approx(4.0)


def test_identity_perturbation_is_minus_the_rho_derivative():
    """Test T' against a central difference of T in rho when Theta = I."""
    c, M, rho, h = np.array([0.5, 1.5, 3.0]), 10, 0.3, 1e-4
    derivative = solve_theorem2(c, 1.0, rho, antennas=M).T_prime
    upper = solve_theorem1(c, rho + h, antennas=M).T
    lower = solve_theorem1(c, rho - h, antennas=M).T
    assert derivative == pytest.approx(-(upper - lower) / (2 * h), rel=1e-5)


@pytest.fixture(scope="module")
def random_report():
    rng = np.random.default_rng(3)
    drop = random_drop(rng, 3, 3, 4)
    powers = uniform_powers(drop).with_ul(rng.uniform(0.5, 2.0, size=(3, 3)))
    link = LinkParams(antennas=32, pilot_length=4)
    stats = compute_estimation_statistics(drop, powers, link)
    return ul_sinr_approx(drop, powers, stats, link)


def test_large_scale_quantities_are_positive(random_report):
    assert np.all(random_report.delta > 0)
    assert np.all(random_report.theta_dprime > 0)
    assert np.all(random_report.mu > 0)
    assert np.all(random_report.ul_sinr > 0)


def test_same_and_other_pilot_masks(random_report):
    same, other = random_report.same_pilot(), random_report.other_pilot()
    assert not np.any(same & other)
    for j in range(3):
        for k in range(3):
            assert not same[j, k, j, k]
            assert not other[j, k, j, k]


def _mirror(cross: float):
    drop = make_drop([[[1.0], [cross]], [[cross], [1.0]]], [[0], [0]])
    powers = uniform_powers(drop, pilot=2.0, ul=2.0, dl=2.0)
    link = LinkParams(antennas=64, pilot_length=1)
    stats = compute_estimation_statistics(drop, powers, link)
    return powers, ul_sinr_approx(drop, powers, stats, link)


def test_mirror_network_has_equal_uplink_and_downlink():
    """Test that two symmetric cells give identical uplink and downlink approximations."""
    powers, report = _mirror(0.3)
    dl = dl_sinr_approx(report, powers.dl).dl_sinr
    np.testing.assert_allclose(dl, report.ul_sinr, rtol=1e-12)
    assert report.ul_sinr[0, 0] == pytest.approx(report.ul_sinr[1, 0], rel=1e-12)


def test_lone_downlink_user_sees_only_noise():
    """Test that with one powered transmitter the downlink denominator is sigma^2 / M."""
    _, report = _mirror(0.3)
    rho = np.array([[1.5], [0.0]])
    dl = dl_sinr_approx(report, rho).dl_sinr
    expected = 1.5 * 2.0 * report.delta[0, 0] ** 2 / report.theta_dprime[0, 0] / (1.0 / 64)
    assert dl[0, 0] == pytest.approx(expected, rel=1e-12)
    assert dl[1, 0] == 0.0


def test_inactive_users_get_zero():
    rng = np.random.default_rng(9)
    base = random_drop(rng, 2, 2, 2)
    drop = make_drop(base.gains, base.pilot_index, active=[[True, False], [True, True]])
    powers = uniform_powers(drop)
    link = LinkParams(antennas=16, pilot_length=2)
    report = ul_sinr_approx(drop, powers, compute_estimation_statistics(drop, powers, link), link)
    report = dl_sinr_approx(report, powers.dl)
    assert report.ul_sinr[0, 1] == 0.0
    assert report.dl_sinr[0, 1] == 0.0
    assert np.all(report.ul_sinr[drop.active] > 0)


def test_se_report_from_approximation(random_report):
    link = LinkParams(antennas=32, pilot_length=4)
    report = deteq_se_report(random_report, link, seed=5)
    assert report.source == "deteq"
    assert report.meta.scheme == "M-MMSE"
    assert report.meta.n_real == 0
    assert report.meta.reuse_factor == 1
    np.testing.assert_array_equal(report.dl_se, 0.0)
    np.testing.assert_allclose(report.ul_se, 0.5 * link.prelog * np.log2(1.0 + random_report.ul_sinr))


def test_filter_power_matches_simulation():
    """Test the approximate E||g||^2 of an isolated M = 256 user against sampled filters (3%)."""
    drop = make_drop([[[1.0]]], [[0]])
    powers = PowerProfile(pilot=np.full((1, 1), 0.01), ul=np.full((1, 1), 0.01), dl=np.full((1, 1), 0.01))
    link = LinkParams(antennas=256, pilot_length=1)
    report = ul_sinr_approx(drop, powers, compute_estimation_statistics(drop, powers, link), link)
    simulated = mc_report(Scheme.M_MMSE, link, drop, powers, n_real=100, rng_seed=23, gamma_trials=400)
    assert gamma_approx(report)[0, 0] == pytest.approx(simulated.extras["gamma"][0, 0], rel=0.03)
