"""Rayleigh channels and pilot-based MMSE channel estimation.

Orthogonal pilots (a B x B DFT book, so v_a^H v_b is 0 or B) reduce the per-BS
estimator to one scalar alpha_jb per pilot; no B x B matrix is ever inverted.
"""

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from mmimo_sim import seeding
from mmimo_sim.config import LinkParams
from mmimo_sim.errors import ConfigurationError
from mmimo_sim.topology import UserDrop


@dataclass(frozen=True)
class PowerProfile:
    """Pilot, uplink payload and downlink payload power per user, shape (L, K) each."""

    pilot: NDArray[np.float64]
    ul: NDArray[np.float64]
    dl: NDArray[np.float64]

    def __post_init__(self) -> None:
        for name in ("pilot", "ul", "dl"):
            value = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(value)) or np.any(value < 0):
                raise ConfigurationError(f"{name} powers must be finite and non-negative")
            object.__setattr__(self, name, value)

    def masked(self, active: NDArray[np.bool_]) -> "PowerProfile":
        """Zero all three powers of inactive users."""
        return PowerProfile(pilot=self.pilot * active, ul=self.ul * active, dl=self.dl * active)

    def with_ul(self, ul: NDArray[np.float64]) -> "PowerProfile":
        return PowerProfile(pilot=self.pilot, ul=ul, dl=self.dl)

    def with_dl(self, dl: NDArray[np.float64]) -> "PowerProfile":
        return PowerProfile(pilot=self.pilot, ul=self.ul, dl=dl)


@dataclass(frozen=True)
class EstimationStatistics:
    """Large-scale estimation quantities seen by every BS.

    Per-link coefficients are indexed [j, l, k]; per-pilot ones [j, b].
    """

    alpha: NDArray[np.float64]  # (J, B)
    lam: NDArray[np.float64]  # (J, B): diagonal of Lambda_j
    phi: NDArray[np.float64]  # (J,)
    phi_hat: NDArray[np.float64]  # (J, L, K): variance of the estimate
    err: NDArray[np.float64]  # (J, L, K): variance of the estimation error
    gains: NDArray[np.float64]  # (J, L, K)
    pilot_index: NDArray[np.int64]  # (L, K)
    noise_power: float
    pilot_length: int

    @property
    def phi_tilde(self) -> NDArray[np.float64]:
        """Per-entry variance alpha_jb * B of the pilot-domain estimate columns, shape (J, B)."""
        return self.alpha * self.pilot_length


def pilot_book(pilot_length: int) -> NDArray[np.complex128]:
    """Unit-modulus DFT pilot book; column b is pilot sequence v_b."""
    n = np.arange(pilot_length)
    return np.exp(-2j * np.pi * np.outer(n, n) / pilot_length)


def _pilot_onehot(pilot_index: NDArray[np.int64], pilot_length: int) -> NDArray[np.float64]:
    return np.eye(pilot_length)[pilot_index]


def compute_estimation_statistics(drop: UserDrop, powers: PowerProfile, link: LinkParams) -> EstimationStatistics:
    """alpha_jb, lambda_jb, phi_j and the per-link estimate/error variances."""
    B = link.pilot_length
    if drop.pilot_index.max() >= B:
        raise ConfigurationError(f"pilot index {drop.pilot_index.max()} out of range for B={B}")
    powers = powers.masked(drop.active)
    d = drop.gains
    onehot = _pilot_onehot(drop.pilot_index, B)

    received = powers.pilot[None] * d
    alpha = 1.0 / (B * np.einsum("jlk,lkb->jb", received, onehot) + link.noise_power)
    lam = np.einsum("jlk,lkb->jb", (powers.ul * powers.pilot)[None] * d**2, onehot)

    alpha_user = alpha[:, drop.pilot_index]
    phi_hat = received * d * alpha_user * B
    err = d * (1.0 - received * alpha_user * B)
    phi = np.einsum("lk,jlk->j", powers.ul, err)

    return EstimationStatistics(
        alpha=alpha,
        lam=lam,
        phi=phi,
        phi_hat=phi_hat,
        err=err,
        gains=d,
        pilot_index=np.asarray(drop.pilot_index),
        noise_power=link.noise_power,
        pilot_length=B,
    )


@dataclass(frozen=True)
class ChannelRealization:
    h: NDArray[np.complex128]  # (J, L, K, M)


@dataclass(frozen=True)
class ChannelEstimate:
    """Per-BS pilot-domain estimates and the per-user estimates derived from them."""

    hv: NDArray[np.complex128]  # (J, M, B): columns are the estimated directions of H_V,j
    hhat: NDArray[np.complex128]  # (J, L, K, M)
    err: NDArray[np.complex128]  # (J, L, K, M): h - hhat
    pilot_index: NDArray[np.int64]  # (L, K)
    active: NDArray[np.bool_]  # (L, K)

    @property
    def cells(self) -> int:
        return self.hhat.shape[1]

    @property
    def serving(self) -> NDArray[np.complex128]:
        """hhat_jjk for every user, shape (L, K, M)."""
        cells = np.arange(self.cells)
        return self.hhat[cells, cells]


def complex_gaussian(rng: np.random.Generator, variance: NDArray[np.float64] | float, shape: tuple[int, ...]) -> NDArray[np.complex128]:
    """Circular complex normal samples, E|x|^2 = variance."""
    scale = np.sqrt(np.asarray(variance) / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def generate_channels(drop: UserDrop, antennas: int, rng_seed: int, index: int = 0) -> ChannelRealization:
    """Draw h_jlk ~ CN(0, d_j(z_lk) I_M); inactive users get all-zero channels."""
    rng = seeding.stream(rng_seed, seeding.CHANNEL, index)
    variance = (drop.gains * drop.active[None])[..., None]
    return ChannelRealization(h=complex_gaussian(rng, variance, drop.gains.shape + (antennas,)))


def estimate_channels(
    chan: ChannelRealization,
    drop: UserDrop,
    powers: PowerProfile,
    stats: EstimationStatistics,
    rng_seed: int,
    index: int = 0,
) -> ChannelEstimate:
    """Form the received pilot signal Y_j and apply the MMSE estimator."""
    rng = seeding.stream(rng_seed, seeding.PILOT_NOISE, index)
    J, L, K, M = chan.h.shape
    B = stats.pilot_length
    powers = powers.masked(drop.active)
    book = pilot_book(B)

    # rows of `sent` are v_{i_lk}^T
    sent = book.T[drop.pilot_index]  # (L, K, B)
    amplitude = np.sqrt(powers.pilot)
    Y = np.einsum("jlkm,lkn->jmn", amplitude[None, :, :, None] * chan.h, sent)
    Y = Y + complex_gaussian(rng, stats.noise_power, (J, M, B))

    hv = stats.alpha[:, None, :] * (Y @ book.conj())
    directions = np.swapaxes(hv, 1, 2)[:, drop.pilot_index]  # (J, L, K, M)
    hhat = (amplitude[None] * stats.gains)[..., None] * directions
    return ChannelEstimate(
        hv=hv,
        hhat=hhat,
        err=chan.h - hhat,
        pilot_index=np.asarray(drop.pilot_index),
        active=np.asarray(drop.active),
    )
