"""Monte Carlo evaluation of uplink/downlink SINR and ergodic spectral efficiency.

Realizations are processed in fixed-size chunks. Chunk boundaries never depend on the
number of workers and chunk results are combined in index order, so a run is
bit-identical for any `jobs`.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from mmimo_sim import seeding
from mmimo_sim.channel import (
    ChannelEstimate,
    EstimationStatistics,
    PowerProfile,
    compute_estimation_statistics,
    estimate_channels,
    generate_channels,
)
from mmimo_sim.config import LinkParams
from mmimo_sim.errors import InsufficientSamplesError, MetadataMismatchError, UndefinedSinrError
from mmimo_sim.filters import FilterBank, Scheme, ZMode, build_filters, estimate_gamma
from mmimo_sim.logging import get_logger
from mmimo_sim.parallel import parallel_map
from mmimo_sim.topology import UserDrop

logger = get_logger(__name__)

CHUNK_SIZE = 25
MIN_DOWNLINK_SAMPLES = 100


@dataclass(frozen=True)
class RunMeta:
    scheme: str
    antennas: int
    users_per_cell: int
    reuse_factor: int
    seed: int
    n_real: int


@dataclass(frozen=True)
class SEReport:
    """Per-user spectral efficiency of one scheme on one drop.

    `ul_rate`/`dl_rate` are log2(1 + SINR) terms without the prelog; the `*_se`
    properties apply zeta * (1 - B/S). Inactive users are zero throughout.
    """

    meta: RunMeta
    source: str  # "mc" or "deteq"
    link: LinkParams
    active: NDArray[np.bool_]
    ul_rate: NDArray[np.float64] | None = None
    dl_rate: NDArray[np.float64] | None = None
    ul_sinr: NDArray[np.float64] | None = None  # (n_real, L, K) samples, or (L, K) for deteq
    dl_sinr: NDArray[np.float64] | None = None  # (L, K)
    extras: dict = field(default_factory=dict)

    def _scaled(self, rate: NDArray[np.float64] | None, fraction: float) -> NDArray[np.float64]:
        if rate is None:
            return np.zeros(self.active.shape)
        return fraction * self.link.prelog * rate * self.active

    @property
    def ul_se(self) -> NDArray[np.float64]:
        return self._scaled(self.ul_rate, self.link.ul_fraction)

    @property
    def dl_se(self) -> NDArray[np.float64]:
        return self._scaled(self.dl_rate, self.link.dl_fraction)

    @property
    def joint_se(self) -> NDArray[np.float64]:
        return self.ul_se + self.dl_se

    def cell_sum_se(self) -> float:
        """Network sum SE divided by the number of cells."""
        return float(self.joint_se.sum() / self.active.shape[0])

    def user_avg_se(self) -> float:
        """Network sum SE divided by the number of served users."""
        return float(self.joint_se.sum() / max(int(self.active.sum()), 1))


def uplink_sinr(
    bank: FilterBank,
    est: ChannelEstimate,
    stats: EstimationStatistics,
    powers: PowerProfile,
    j: int,
    k: int,
) -> float:
    """Uplink SINR of user k in cell j given the channel estimates.

    Interference from user (l, m) is tau_lm (|g^H hhat_jlm|^2 + err_jlm ||g||^2); the
    intended user contributes only its own estimation error.
    """
    g = bank.g[j, k]
    norm2 = float(np.vdot(g, g).real)
    if norm2 == 0.0:
        raise UndefinedSinrError(f"detector of user ({j}, {k}) is the zero vector")
    tau = powers.ul
    L, K = tau.shape
    signal = tau[j, k] * abs(np.vdot(g, est.hhat[j, j, k])) ** 2
    denominator = stats.noise_power * norm2
    for l in range(L):
        for m in range(K):
            denominator += tau[l, m] * stats.err[j, l, m] * norm2
            if (l, m) != (j, k):
                denominator += tau[l, m] * abs(np.vdot(g, est.hhat[j, l, m])) ** 2
    return float(signal / denominator)


def uplink_sinrs(
    bank: FilterBank,
    est: ChannelEstimate,
    stats: EstimationStatistics,
    powers: PowerProfile,
) -> NDArray[np.float64]:
    """`uplink_sinr` for every user at once, shape (L, K); zero for zero detectors."""
    L, K, M = bank.g.shape
    tau = powers.ul.reshape(-1)
    sinr = np.zeros((L, K))
    for j in range(L):
        g = bank.g[j]
        proj = np.abs(g.conj() @ est.hhat[j].reshape(L * K, M).T) ** 2  # (K, LK)
        own = proj[np.arange(K), j * K + np.arange(K)] * powers.ul[j]
        norm2 = np.sum(np.abs(g) ** 2, axis=-1)
        denominator = proj @ tau - own + (stats.phi[j] + stats.noise_power) * norm2
        np.divide(own, denominator, out=sinr[j], where=norm2 > 0)
    return sinr


@dataclass(frozen=True)
class _ChunkTask:
    scheme: Scheme
    link: LinkParams
    drop: UserDrop
    powers: PowerProfile
    stats: EstimationStatistics
    seed: int
    start: int
    stop: int
    z_mode: ZMode
    uplink: bool = True
    downlink: bool = False
    gamma: bool = False


@dataclass
class _ChunkResult:
    ul_sinr: NDArray[np.float64] | None = None
    signal: NDArray[np.complex128] | None = None
    cross: NDArray[np.float64] | None = None
    gamma_sum: NDArray[np.float64] | None = None


def _bank_for(task: _ChunkTask, index: int) -> tuple[NDArray[np.complex128], ChannelEstimate, FilterBank]:
    chan = generate_channels(task.drop, task.link.antennas, task.seed, index)
    est = estimate_channels(chan, task.drop, task.powers, task.stats, task.seed, index)
    return chan.h, est, build_filters(task.scheme, est, task.stats, task.powers, task.z_mode)


def _run_chunk(task: _ChunkTask) -> _ChunkResult:
    result = _ChunkResult()
    if task.gamma:
        count = task.stop - task.start
        result.gamma_sum = estimate_gamma(lambda i: _bank_for(task, task.start + i)[2], count) * count
        return result

    samples = []
    for index in range(task.start, task.stop):
        h, est, bank = _bank_for(task, index)
        if task.uplink:
            samples.append(uplink_sinrs(bank, est, task.stats, task.powers))
        if task.downlink:
            L = h.shape[0]
            cells = np.arange(L)
            # signal[j, k] = h_jjk^H g_jk ; cross[l, j, k, m] = |h_ljk^H g_lm|^2
            signal = np.einsum("jkm,jkm->jk", h[cells, cells].conj(), bank.g)
            K = bank.g.shape[1]
            cross = np.abs(h.conj().reshape(L, L * K, -1) @ np.swapaxes(bank.g, 1, 2)) ** 2
            cross = cross.reshape(L, L, K, K)
            result.signal = signal if result.signal is None else result.signal + signal
            result.cross = cross if result.cross is None else result.cross + cross
    if task.uplink:
        result.ul_sinr = np.stack(samples)
    return result


def _tasks(n_real: int, **kwargs) -> list[_ChunkTask]:
    return [
        _ChunkTask(start=start, stop=min(start + CHUNK_SIZE, n_real), **kwargs)
        for start in range(0, n_real, CHUNK_SIZE)
    ]


def _ordered_sum(parts: list[NDArray]) -> NDArray:
    total = parts[0].copy()
    for part in parts[1:]:
        total += part
    return total


@dataclass(frozen=True)
class _Simulation:
    ul_sinr: NDArray[np.float64] | None
    signal_mean: NDArray[np.complex128] | None
    cross_mean: NDArray[np.float64] | None
    gamma: NDArray[np.float64] | None


def _simulate(
    scheme: Scheme,
    link: LinkParams,
    drop: UserDrop,
    powers: PowerProfile,
    n_real: int,
    rng_seed: int,
    *,
    uplink: bool,
    downlink: bool,
    gamma_trials: int,
    jobs: int,
    z_mode: ZMode,
) -> _Simulation:
    powers = powers.masked(drop.active)
    stats = compute_estimation_statistics(drop, powers, link)
    common = dict(scheme=scheme, link=link, drop=drop, powers=powers, stats=stats, z_mode=z_mode)

    tasks = _tasks(n_real, seed=rng_seed, uplink=uplink, downlink=downlink, **common)
    if downlink:
        tasks += _tasks(gamma_trials, seed=seeding.derived(rng_seed, seeding.GAMMA), uplink=False, gamma=True, **common)
    logger.info("mc_run", scheme=str(scheme), n_real=n_real, chunks=len(tasks), jobs=jobs, downlink=downlink)
    results = parallel_map(_run_chunk, tasks, jobs)
    realization_results = [r for r, t in zip(results, tasks) if not t.gamma]
    gamma_results = [r for r, t in zip(results, tasks) if t.gamma]

    ul_sinr = np.concatenate([r.ul_sinr for r in realization_results]) if uplink else None
    signal_mean = cross_mean = gamma = None
    if downlink:
        signal_mean = _ordered_sum([r.signal for r in realization_results]) / n_real
        cross_mean = _ordered_sum([r.cross for r in realization_results]) / n_real
        gamma = _ordered_sum([r.gamma_sum for r in gamma_results]) / gamma_trials
    return _Simulation(ul_sinr=ul_sinr, signal_mean=signal_mean, cross_mean=cross_mean, gamma=gamma)


def assemble_downlink_sinr(
    signal_mean: NDArray[np.complex128],
    cross_mean: NDArray[np.float64],
    gamma: NDArray[np.float64],
    dl_powers: NDArray[np.float64],
    noise_power: float,
) -> NDArray[np.float64]:
    """Downlink SINR with precoders w = g / sqrt(gamma), from sample moments of h^H g.

    signal_mean[j, k] estimates E{h_jjk^H g_jk}; cross_mean[l, j, k, m] estimates
    E{|h_ljk^H g_lm|^2}. Raises when the variance subtraction leaves a non-positive
    denominator for a served user.
    """
    served = gamma > 0
    safe_gamma = np.where(served, gamma, np.inf)
    coherent = np.abs(signal_mean) ** 2 / safe_gamma
    second = cross_mean / safe_gamma[:, None, None, :]
    interference = np.einsum("ljkm,lm->jk", second, dl_powers)
    numerator = dl_powers * coherent
    denominator = interference - numerator + noise_power
    receiving = served & (dl_powers > 0)
    if np.any(denominator[receiving] <= 0):
        raise InsufficientSamplesError("downlink SINR denominator is not positive; increase n_real")
    sinr = np.zeros_like(numerator)
    np.divide(numerator, denominator, out=sinr, where=receiving)
    return sinr


def _meta(scheme: Scheme, link: LinkParams, drop: UserDrop, rng_seed: int, n_real: int) -> RunMeta:
    return RunMeta(
        scheme=str(scheme),
        antennas=link.antennas,
        users_per_cell=drop.users_per_cell,
        reuse_factor=link.pilot_length // drop.users_per_cell,
        seed=rng_seed,
        n_real=n_real,
    )


def uplink_se(
    scheme: Scheme,
    link: LinkParams,
    drop: UserDrop,
    powers: PowerProfile,
    n_real: int,
    rng_seed: int,
    jobs: int = 1,
    z_mode: ZMode = ZMode.STATISTICAL,
) -> SEReport:
    """Ergodic uplink SE: zeta_ul (1 - B/S) E{log2(1 + SINR)} per user."""
    if n_real < 1:
        raise InsufficientSamplesError("n_real must be at least 1")
    sim = _simulate(
        scheme, link, drop, powers, n_real, rng_seed,
        uplink=True, downlink=False, gamma_trials=0, jobs=jobs, z_mode=z_mode,
    )
    return SEReport(
        meta=_meta(scheme, link, drop, rng_seed, n_real),
        source="mc",
        link=link,
        active=np.asarray(drop.active),
        ul_rate=np.mean(np.log2(1.0 + sim.ul_sinr), axis=0),
        ul_sinr=sim.ul_sinr,
    )


def downlink_sinr(
    scheme: Scheme,
    link: LinkParams,
    drop: UserDrop,
    powers: PowerProfile,
    n_real: int,
    rng_seed: int,
    gamma_trials: int = 500,
    jobs: int = 1,
    z_mode: ZMode = ZMode.STATISTICAL,
) -> NDArray[np.float64]:
    """Per-user downlink SINR with duality-normalized precoders, shape (L, K)."""
    if n_real < MIN_DOWNLINK_SAMPLES:
        raise InsufficientSamplesError(f"downlink needs n_real >= {MIN_DOWNLINK_SAMPLES}, got {n_real}")
    sim = _simulate(
        scheme, link, drop, powers, n_real, rng_seed,
        uplink=False, downlink=True, gamma_trials=gamma_trials, jobs=jobs, z_mode=z_mode,
    )
    return assemble_downlink_sinr(sim.signal_mean, sim.cross_mean, sim.gamma, powers.masked(drop.active).dl, link.noise_power)


def mc_report(
    scheme: Scheme,
    link: LinkParams,
    drop: UserDrop,
    powers: PowerProfile,
    n_real: int,
    rng_seed: int,
    gamma_trials: int = 500,
    jobs: int = 1,
    z_mode: ZMode = ZMode.STATISTICAL,
) -> SEReport:
    """Uplink and downlink SE from one shared set of realizations."""
    if n_real < MIN_DOWNLINK_SAMPLES:
        raise InsufficientSamplesError(f"downlink needs n_real >= {MIN_DOWNLINK_SAMPLES}, got {n_real}")
    sim = _simulate(
        scheme, link, drop, powers, n_real, rng_seed,
        uplink=True, downlink=True, gamma_trials=gamma_trials, jobs=jobs, z_mode=z_mode,
    )
    dl = assemble_downlink_sinr(sim.signal_mean, sim.cross_mean, sim.gamma, powers.masked(drop.active).dl, link.noise_power)
    return SEReport(
        meta=_meta(scheme, link, drop, rng_seed, n_real),
        source="mc",
        link=link,
        active=np.asarray(drop.active),
        ul_rate=np.mean(np.log2(1.0 + sim.ul_sinr), axis=0),
        dl_rate=np.log2(1.0 + dl),
        ul_sinr=sim.ul_sinr,
        dl_sinr=dl,
        extras={"gamma": sim.gamma},
    )


def downlink_report(ul: SEReport, dl_sinr: NDArray[np.float64]) -> SEReport:
    """Downlink-only report sharing `ul`'s metadata."""
    return SEReport(
        meta=ul.meta,
        source=ul.source,
        link=ul.link,
        active=ul.active,
        dl_rate=np.log2(1.0 + dl_sinr),
        dl_sinr=dl_sinr,
    )


def joint_se(ul: SEReport, dl: SEReport) -> SEReport:
    """Combine an uplink and a downlink report of the same run."""
    if ul.meta != dl.meta or ul.source != dl.source or ul.link != dl.link:
        raise MetadataMismatchError(f"cannot combine {ul.meta}/{ul.source} with {dl.meta}/{dl.source}")
    if not np.array_equal(ul.active, dl.active):
        raise MetadataMismatchError("reports cover different active users")
    return SEReport(
        meta=ul.meta,
        source=ul.source,
        link=ul.link,
        active=ul.active,
        ul_rate=ul.ul_rate,
        dl_rate=dl.dl_rate,
        ul_sinr=ul.ul_sinr,
        dl_sinr=dl.dl_sinr,
    )
