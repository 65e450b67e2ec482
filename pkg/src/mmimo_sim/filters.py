"""Uplink detectors and the downlink precoders derived from them."""

from collections.abc import Callable
from dataclasses import dataclass, replace
from enum import StrEnum

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import cho_factor, cho_solve, solve

from mmimo_sim.channel import ChannelEstimate, EstimationStatistics, PowerProfile
from mmimo_sim.errors import UnsupportedConfigurationError


class Scheme(StrEnum):
    M_MMSE = "M-MMSE"
    S_MMSE = "S-MMSE"
    M_ZF = "M-ZF"
    MF = "MF"


class ZMode(StrEnum):
    ZERO = "zero"
    STATISTICAL = "statistical"


@dataclass(frozen=True)
class FilterBank:
    """Detectors g_jk for one realization, shape (L, K, M) indexed by serving BS and user.

    `gamma` and `w` are filled by `normalize_precoders`.
    """

    kind: Scheme
    g: NDArray[np.complex128]
    gamma: NDArray[np.float64] | None = None
    w: NDArray[np.complex128] | None = None


def _hermitian_solve(A: NDArray[np.complex128], rhs: NDArray[np.complex128]) -> NDArray[np.complex128]:
    """Solve A X = rhs for Hermitian positive definite A with a single factorization."""
    factor = cho_factor(A, lower=True, check_finite=False)
    return cho_solve(factor, rhs, check_finite=False)


def m_mmse_detector(est: ChannelEstimate, stats: EstimationStatistics, powers: PowerProfile) -> FilterBank:
    """g_jk = (H_V,j Lambda_j H_V,j^H + (sigma^2 + phi_j) I)^-1 hhat_jjk."""
    L, M = est.cells, est.hv.shape[1]
    serving = est.serving
    identity = np.eye(M)
    g = np.empty_like(serving)
    for j in range(L):
        hv = est.hv[j]
        A = (hv * stats.lam[j]) @ hv.conj().T + (stats.noise_power + stats.phi[j]) * identity
        g[j] = _hermitian_solve(A, serving[j].T).T
    return FilterBank(kind=Scheme.M_MMSE, g=g)


def s_mmse_ridge(stats: EstimationStatistics, powers: PowerProfile, j: int, z_mode: ZMode) -> float:
    """Scalar Z_j of the single-cell detector under the scaled-identity channel model."""
    if z_mode is ZMode.ZERO:
        return 0.0
    tau = powers.ul
    own = float(np.sum(tau[j] * stats.err[j, j]))
    others = np.delete(np.arange(tau.shape[0]), j)
    inter = float(np.sum(tau[others] * stats.gains[j, others]))
    return own + inter


def s_mmse_detector(
    est: ChannelEstimate,
    stats: EstimationStatistics,
    powers: PowerProfile,
    z_mode: ZMode = ZMode.STATISTICAL,
) -> FilterBank:
    """g_jk = (sum_m tau_jm hhat_jjm hhat_jjm^H + Z_j + sigma^2 I)^-1 hhat_jjk."""
    L, M = est.cells, est.hv.shape[1]
    serving = est.serving
    identity = np.eye(M)
    g = np.empty_like(serving)
    for j in range(L):
        H = serving[j]  # (K, M)
        A = (H.T * powers.ul[j]) @ H.conj() + (stats.noise_power + s_mmse_ridge(stats, powers, j, z_mode)) * identity
        g[j] = _hermitian_solve(A, H.T).T
    return FilterBank(kind=Scheme.S_MMSE, g=g)


def m_zf_detector(est: ChannelEstimate) -> FilterBank:
    """Column i_jk of the pseudoinverse of H_V,j: g_jk^H H_V,j = e_{i_jk}^T."""
    L, M, B = est.hv.shape
    if M <= B:
        raise UnsupportedConfigurationError(f"M-ZF needs M > B (got M={M}, B={B}); minimum M is B + 1")
    g = np.empty((L, est.pilot_index.shape[1], M), dtype=complex)
    for j in range(L):
        hv = est.hv[j]
        gram = hv.conj().T @ hv
        coefficients = solve(gram, np.eye(B)[:, est.pilot_index[j]], assume_a="pos", check_finite=False)
        g[j] = (hv @ coefficients).T
    return FilterBank(kind=Scheme.M_ZF, g=g * est.active[..., None])


def mf_detector(est: ChannelEstimate) -> FilterBank:
    return FilterBank(kind=Scheme.MF, g=est.serving.copy())


def build_filters(
    scheme: Scheme,
    est: ChannelEstimate,
    stats: EstimationStatistics,
    powers: PowerProfile,
    z_mode: ZMode = ZMode.STATISTICAL,
) -> FilterBank:
    match scheme:
        case Scheme.M_MMSE:
            return m_mmse_detector(est, stats, powers)
        case Scheme.S_MMSE:
            return s_mmse_detector(est, stats, powers, z_mode)
        case Scheme.M_ZF:
            return m_zf_detector(est)
        case Scheme.MF:
            return mf_detector(est)
    raise ValueError(f"unknown scheme {scheme!r}")


def estimate_gamma(rebuild: Callable[[int], FilterBank], gamma_trials: int) -> NDArray[np.float64]:
    """Sample mean of ||g_jk||^2 over `gamma_trials` independently rebuilt banks."""
    if gamma_trials < 1:
        raise ValueError("gamma_trials must be at least 1")
    total = None
    for trial in range(gamma_trials):
        power = np.sum(np.abs(rebuild(trial).g) ** 2, axis=-1)
        total = power if total is None else total + power
    return total / gamma_trials


def scale_precoders(bank: FilterBank, gamma: NDArray[np.float64]) -> FilterBank:
    """w_jk = g_jk / sqrt(gamma_jk); users with gamma = 0 get w = 0."""
    root = np.sqrt(gamma)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(root[..., None] > 0, bank.g / root[..., None], 0.0)
    return replace(bank, gamma=gamma, w=w)


def normalize_precoders(bank: FilterBank, rebuild: Callable[[int], FilterBank], gamma_trials: int) -> FilterBank:
    """Estimate gamma_jk = E{||g_jk||^2} over fresh realizations and scale `bank` by it.

    `rebuild(i)` must return the bank of the same scheme for the i-th independent
    channel realization (new channels, new pilot noise, new estimate).
    """
    return scale_precoders(bank, estimate_gamma(rebuild, gamma_trials))
