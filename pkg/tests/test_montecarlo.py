"""Tests for the Monte Carlo SINR and SE evaluation."""

import numpy as np
import pytest

from mmimo_sim.channel import (
    PowerProfile,
    complex_gaussian,
    compute_estimation_statistics,
    estimate_channels,
    generate_channels,
)
from mmimo_sim.config import LinkParams
from mmimo_sim.deteq import ul_sinr_approx
from mmimo_sim.errors import InsufficientSamplesError, MetadataMismatchError, UndefinedSinrError
from mmimo_sim.filters import FilterBank, Scheme, m_mmse_detector
from mmimo_sim.montecarlo import (
    assemble_downlink_sinr,
    downlink_report,
    downlink_sinr,
    joint_se,
    mc_report,
    uplink_se,
    uplink_sinr,
    uplink_sinrs,
)
from tests.conftest import make_drop, random_drop, uniform_powers


def test_vectorized_sinr_matches_scalar_definition(two_cell_drop, two_cell_link):
    """Test that the batched SINR equals the literal per-user sum."""
    powers = uniform_powers(two_cell_drop).with_ul(np.array([[1.0, 0.5], [2.0, 1.5]]))
    stats = compute_estimation_statistics(two_cell_drop, powers, two_cell_link)
    chan = generate_channels(two_cell_drop, two_cell_link.antennas, rng_seed=8)
    est = estimate_channels(chan, two_cell_drop, powers, stats, rng_seed=8)
    bank = m_mmse_detector(est, stats, powers)
    batched = uplink_sinrs(bank, est, stats, powers)
    for j in range(2):
        for k in range(2):
            assert batched[j, k] == pytest.approx(uplink_sinr(bank, est, stats, powers, j, k), rel=1e-10)


def test_zero_detector_has_no_sinr(two_cell_drop, two_cell_link):
    powers = uniform_powers(two_cell_drop)
    stats = compute_estimation_statistics(two_cell_drop, powers, two_cell_link)
    est = estimate_channels(generate_channels(two_cell_drop, 16, rng_seed=1), two_cell_drop, powers, stats, rng_seed=1)
    bank = FilterBank(kind=Scheme.MF, g=np.zeros_like(est.serving))
    with pytest.raises(UndefinedSinrError):
        uplink_sinr(bank, est, stats, powers, 0, 0)
    np.testing.assert_array_equal(uplink_sinrs(bank, est, stats, powers), 0.0)


def test_single_user_matches_large_scale_approximation():
    """Test an isolated user at M = 256 against the large-scale uplink SINR (2%)."""
    drop = make_drop([[[1.0]]], [[0]])
    powers = PowerProfile(pilot=np.full((1, 1), 0.01), ul=np.full((1, 1), 0.01), dl=np.full((1, 1), 0.01))
    link = LinkParams(antennas=256, pilot_length=1)
    report = uplink_se(Scheme.M_MMSE, link, drop, powers, n_real=1000, rng_seed=17)
    stats = compute_estimation_statistics(drop, powers, link)
    approx = ul_sinr_approx(drop, powers, stats, link)
    assert np.mean(report.ul_sinr) == pytest.approx(approx.ul_sinr[0, 0], rel=0.02)


def test_results_do_not_depend_on_worker_count(two_cell_drop, two_cell_link):
    powers = uniform_powers(two_cell_drop)
    serial = uplink_se(Scheme.M_MMSE, two_cell_link, two_cell_drop, powers, n_real=60, rng_seed=5, jobs=1)
    parallel = uplink_se(Scheme.M_MMSE, two_cell_link, two_cell_drop, powers, n_real=60, rng_seed=5, jobs=2)
    np.testing.assert_array_equal(serial.ul_sinr, parallel.ul_sinr)
    np.testing.assert_array_equal(serial.ul_rate, parallel.ul_rate)


def test_se_prelog_and_aggregates(two_cell_drop):
    """Test that SE applies zeta (1 - B/S) and that aggregates divide by cells and users."""
    link = LinkParams(antennas=16, pilot_length=2, coherence_symbols=200, ul_fraction=0.5)
    powers = uniform_powers(two_cell_drop)
    report = uplink_se(Scheme.MF, link, two_cell_drop, powers, n_real=30, rng_seed=2)
    np.testing.assert_allclose(report.ul_se, 0.5 * 0.99 * report.ul_rate)
    np.testing.assert_array_equal(report.dl_se, 0.0)
    assert report.cell_sum_se() == pytest.approx(report.joint_se.sum() / 2)
    assert report.user_avg_se() == pytest.approx(report.joint_se.sum() / 4)
    assert report.source == "mc"
    assert report.meta.n_real == 30


def test_downlink_needs_enough_samples(two_cell_drop, two_cell_link):
    with pytest.raises(InsufficientSamplesError):
        downlink_sinr(Scheme.M_MMSE, two_cell_link, two_cell_drop, uniform_powers(two_cell_drop), n_real=50, rng_seed=1)


def test_assemble_downlink_sinr_from_moments():
    """Test the downlink SINR on hand-made moments of one user and one interferer."""
    signal = np.array([[2.0 + 0.0j, 1.0 + 0.0j]])  # (L=1, K=2)
    cross = np.zeros((1, 1, 2, 2))
    cross[0, 0, 0, 0] = 5.0
    cross[0, 0, 0, 1] = 3.0
    cross[0, 0, 1, 1] = 2.0
    cross[0, 0, 1, 0] = 1.0
    gamma = np.array([[1.0, 2.0]])
    rho = np.array([[1.0, 4.0]])
    sinr = assemble_downlink_sinr(signal, cross, gamma, rho, noise_power=1.0)
    # user 0: 1*4/1 / (1*5/1 - 4 + 4*3/2 + 1)
    assert sinr[0, 0] == pytest.approx(4.0 / 8.0)
    # user 1: 4*1/2 / (4*2/2 - 2 + 1*1/1 + 1)
    assert sinr[0, 1] == pytest.approx(2.0 / 4.0)


def test_mc_report_and_joint_se(two_cell_drop, two_cell_link):
    powers = uniform_powers(two_cell_drop)
    full = mc_report(Scheme.M_MMSE, two_cell_link, two_cell_drop, powers, n_real=100, rng_seed=3, gamma_trials=20)
    assert full.dl_sinr.shape == (2, 2)
    assert np.all(full.dl_sinr > 0)
    assert full.extras["gamma"].shape == (2, 2)

    combined = joint_se(full, downlink_report(full, full.dl_sinr))
    np.testing.assert_allclose(combined.joint_se, full.joint_se)

    other = uplink_se(Scheme.MF, two_cell_link, two_cell_drop, powers, n_real=10, rng_seed=3)
    with pytest.raises(MetadataMismatchError):
        joint_se(other, full)


def test_inactive_users_have_zero_se():
    rng = np.random.default_rng(0)
    base = random_drop(rng, 2, 2, 2)
    drop = make_drop(base.gains, base.pilot_index, active=[[True, True], [False, True]])
    link = LinkParams(antennas=8, pilot_length=2)
    report = mc_report(Scheme.S_MMSE, link, drop, uniform_powers(drop), n_real=100, rng_seed=4, gamma_trials=10)
    assert report.joint_se[1, 0] == 0.0
    assert report.dl_sinr[1, 0] == 0.0
    assert np.all(report.joint_se[drop.active] > 0)


@pytest.mark.parametrize("j, k", [(0, 0), (1, 1)])
def test_sinr_denominator_is_the_conditional_interference_power(two_cell_drop, two_cell_link, j, k):
    """Test the denominator against fresh error, data and noise draws around fixed estimates."""
    powers = uniform_powers(two_cell_drop).with_ul(np.array([[1.0, 0.5], [2.0, 1.5]]))
    stats = compute_estimation_statistics(two_cell_drop, powers, two_cell_link)
    M = two_cell_link.antennas
    est = estimate_channels(generate_channels(two_cell_drop, M, rng_seed=3), two_cell_drop, powers, stats, rng_seed=3)
    bank = m_mmse_detector(est, stats, powers)
    g = bank.g[j, k]

    rng = np.random.default_rng(99)
    n = 50_000
    known = est.hhat[j].copy()
    known[j, k] = 0.0  # the intended user's estimate carries the signal
    channels = known[None] + complex_gaussian(rng, stats.err[j][None, ..., None], (n, 2, 2, M))
    symbols = complex_gaussian(rng, powers.ul[None], (n, 2, 2))
    noise = complex_gaussian(rng, stats.noise_power, (n, M))
    received = np.einsum("nlk,nlkm->nm", symbols, channels) + noise
    interference = np.mean(np.abs(received @ g.conj()) ** 2)

    signal = powers.ul[j, k] * abs(np.vdot(g, est.hhat[j, j, k])) ** 2
    sinr = uplink_sinr(bank, est, stats, powers, j, k)
    assert signal / sinr == pytest.approx(interference, rel=0.03)
