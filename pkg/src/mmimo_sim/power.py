"""Power policies, uplink-downlink duality and sum-SE power control.

The duality system is indexed over active users only, in row-major (cell, user) order.
"""

from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path
from typing import TypeVar

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import LinAlgError, solve

from mmimo_sim.channel import (
    ChannelEstimate,
    EstimationStatistics,
    PowerProfile,
    compute_estimation_statistics,
    estimate_channels,
    generate_channels,
)
from mmimo_sim.config import LinkParams, NetworkScenario
from mmimo_sim.deteq import DetEqReport, dl_sinr_approx, ul_sinr_approx
from mmimo_sim.errors import (
    ConfigurationError,
    IncompleteReportError,
    InfeasibleError,
    InsufficientSamplesError,
    NonConvergenceError,
    UndefinedSinrError,
)
from mmimo_sim.filters import FilterBank, Scheme, m_mmse_detector
from mmimo_sim.logging import get_logger
from mmimo_sim.montecarlo import RunMeta, SEReport
from mmimo_sim.parallel import parallel_map
from mmimo_sim.topology import UserDrop

logger = get_logger(__name__)

MAX_OUTER_ITERATIONS = 100
MAX_INNER_ITERATIONS = 500
DEFAULT_EPS = 1e-4
MONOTONICITY_TOLERANCE = 1e-9

T = TypeVar("T")


def channel_inversion_powers(drop: UserDrop, rho: float) -> PowerProfile:
    """p_lk = tau_lk = rho / d_l(z_lk); downlink powers are left at zero."""
    pilot = _inverted(drop, rho)
    return PowerProfile(pilot=pilot, ul=pilot.copy(), dl=np.zeros_like(pilot))


def equal_power_profile(drop: UserDrop, rho: float, pmax: float) -> PowerProfile:
    """Channel-inversion pilots and tau = P_max for every active user."""
    pilot = _inverted(drop, rho)
    return PowerProfile(pilot=pilot, ul=pmax * drop.active, dl=np.zeros_like(pilot))


def _inverted(drop: UserDrop, rho: float) -> NDArray[np.float64]:
    gains = drop.serving_gains
    with np.errstate(divide="ignore"):
        return np.where(drop.active, rho / gains, 0.0)


def pmax_from_edge_snr(scenario: NetworkScenario, edge_snr_db: float) -> float:
    """Power giving SNR `edge_snr_db` at the cell edge without shadowing."""
    return 10 ** (edge_snr_db / 10) * scenario.noise_power * scenario.cell_radius_m**scenario.pathloss_exponent


def load_weights(source: str | Path, shape: tuple[int, int]) -> NDArray[np.float64]:
    """Per-user weights xi: "uniform" or a whitespace-separated L x K text matrix."""
    if str(source) == "uniform":
        return np.ones(shape)
    path = Path(source)
    try:
        weights = np.loadtxt(path, ndmin=2)
    except (OSError, ValueError) as e:
        raise ConfigurationError(f"cannot read weights from {path}: {e}") from e
    if weights.shape != shape:
        raise ConfigurationError(f"weights in {path} have shape {weights.shape}, expected {shape}")
    if not np.all(weights > 0):
        raise ConfigurationError(f"weights in {path} must be positive")
    return weights


@dataclass(frozen=True)
class DualitySystem:
    """Uplink SINR of every active user as tau_l D_l / ((F tau)_l + noise).

    Row l of F holds the interference received by user l; the downlink SINR of the
    same users under powers rho is rho_l D_l / ((F^T rho)_l + noise). The large-scale
    system has noise sigma^2/M; the per-realization one has sigma^2.
    """

    D: NDArray[np.float64]  # (N,) diagonal
    F: NDArray[np.float64]  # (N, N)
    users: NDArray[np.int64]  # (N, 2): (cell, user) of each row
    shape: tuple[int, int]
    noise: float

    @property
    def size(self) -> int:
        return len(self.D)

    def flatten(self, values: NDArray) -> NDArray:
        return values[self.users[:, 0], self.users[:, 1]]

    def unflatten(self, values: NDArray) -> NDArray[np.float64]:
        out = np.zeros(self.shape)
        out[self.users[:, 0], self.users[:, 1]] = values
        return out

    def uplink_sinr(self, tau: NDArray[np.float64]) -> NDArray[np.float64]:
        return tau * self.D / (self.F @ tau + self.noise)

    def downlink_sinr(self, rho: NDArray[np.float64]) -> NDArray[np.float64]:
        return rho * self.D / (self.F.T @ rho + self.noise)


def build_duality_system(report: DetEqReport) -> DualitySystem:
    """Assemble D and F from a completed large-scale uplink report."""
    users = np.argwhere(report.active)
    cells, index = users[:, 0], users[:, 1]
    for name in ("delta", "theta_dprime", "mu", "ul_sinr"):
        if not np.all(np.isfinite(getattr(report, name))):
            raise IncompleteReportError(f"large-scale report has non-finite {name}")

    M = report.antennas
    p = report.pilot_power[cells, index]
    delta2 = report.delta[cells, index] ** 2
    theta_dprime = report.theta_dprime[cells, index]
    serving = report.gains[cells, cells, index]

    # [a, b]: observing BS of row a, gain towards the user of column b
    gains = report.gains[cells][:, cells, index]
    mu = report.mu[cells, index][:, cells, index]
    same = report.same_pilot()[cells, index][:, cells, index]
    other = report.other_pilot()[cells, index][:, cells, index]

    F = np.where(same, delta2[:, None] * p[None, :] * gains**2 / theta_dprime[:, None], 0.0)
    F = F + np.where(other, gains * mu / (M * theta_dprime[:, None]), 0.0)
    return DualitySystem(
        D=p * serving**2 * delta2 / theta_dprime,
        F=F,
        users=users,
        shape=report.active.shape,
        noise=report.noise_power / M,
    )


def uplink_to_downlink(system: DualitySystem, tau: NDArray[np.float64]) -> NDArray[np.float64]:
    """Downlink powers rho (L, K) achieving the uplink SINRs of `tau` with the same total power.

    Raises:
        InfeasibleError: if D - Psi F^T is singular or the solution has negative entries
    """
    if system.size == 0:
        return np.zeros(system.shape)
    flat_tau = system.flatten(tau)
    psi = system.uplink_sinr(flat_tau)
    A = np.diag(system.D) - psi[:, None] * system.F.T
    try:
        rho = system.noise * solve(A, psi, check_finite=False)
    except LinAlgError as e:
        raise InfeasibleError("duality system is singular", diagnostics={"sinr": psi.tolist()}) from e

    floor = -1e-12 * max(float(np.max(np.abs(rho))), 1.0)
    if not np.all(np.isfinite(rho)) or np.any(rho < floor):
        raise InfeasibleError(
            "target SINRs are not achievable in the downlink",
            diagnostics={"min_power": float(np.min(rho)), "sinr": psi.tolist()},
        )
    return system.unflatten(np.maximum(rho, 0.0))


def fixed_point_update(
    system: DualitySystem,
    tau: NDArray[np.float64],
    weights: NDArray[np.float64],
    pmax: float,
) -> NDArray[np.float64]:
    """tau_l <- min(xi_l / sum_j xi_j F_jl r_j / (D_j tau_j), P_max) on flat arrays.

    Users that receive no interference-weighted coupling (empty sum) go to P_max.
    """
    # r_j / (D_j tau_j) = 1 / ((F tau)_j + noise)
    coupling = system.F.T @ (weights / (system.F @ tau + system.noise))
    with np.errstate(divide="ignore"):
        unclipped = np.where(coupling > 0, weights / coupling, np.inf)
    return np.minimum(unclipped, pmax)


def surrogate_objective(sinr: NDArray[np.float64], weights: NDArray[np.float64]) -> float:
    """sum xi log2(r), the high-SINR objective the fixed point maximizes."""
    return float(np.sum(weights * np.log2(sinr)))


def true_objective(sinr: NDArray[np.float64], weights: NDArray[np.float64]) -> float:
    """sum xi log2(1 + r)."""
    return float(np.sum(weights * np.log2(1.0 + sinr)))


@dataclass(frozen=True)
class TraceRow:
    outer: int
    inner: int
    surrogate: float
    objective: float


@dataclass
class PowerControlState:
    """Iterate and objective history of the power-control loop (single owner)."""

    tau: NDArray[np.float64]  # (L, K)
    weights: NDArray[np.float64]
    pmax: float
    trace: list[TraceRow] = field(default_factory=list)
    outer: int = 0
    inner: int = 0


def inner_iterations(
    system: DualitySystem,
    state: PowerControlState,
    eps: float = DEFAULT_EPS,
    max_inner: int = MAX_INNER_ITERATIONS,
) -> NDArray[np.float64]:
    """Run the fixed point on a frozen (F, D) until the surrogate moves by at most `eps`.

    Raises:
        NonConvergenceError: if an iteration decreases the surrogate objective
    """
    weights = system.flatten(state.weights)
    tau = system.flatten(state.tau)
    current = surrogate_objective(system.uplink_sinr(tau), weights)
    for inner in range(1, max_inner + 1):
        tau = fixed_point_update(system, tau, weights, state.pmax)
        sinr = system.uplink_sinr(tau)
        updated = surrogate_objective(sinr, weights)
        if updated < current - MONOTONICITY_TOLERANCE * max(abs(current), 1.0):
            raise NonConvergenceError(
                f"surrogate objective decreased from {current:.12g} to {updated:.12g}",
                residual=current - updated,
                trace=state.trace,
            )
        state.inner += 1
        state.trace.append(TraceRow(state.outer, inner, updated, true_objective(sinr, weights)))
        if abs(updated - current) <= eps:
            break
        current = updated
    else:
        logger.warning("inner_loop_capped", outer=state.outer, iterations=max_inner)
    return system.unflatten(tau)


def downlink_by_duality(
    drop: UserDrop,
    powers: PowerProfile,
    link: LinkParams,
) -> tuple[PowerProfile, DetEqReport]:
    """Fill the downlink powers of `powers` from the uplink SINRs they achieve."""
    stats = compute_estimation_statistics(drop, powers, link)
    report = ul_sinr_approx(drop, powers, stats, link)
    rho = uplink_to_downlink(build_duality_system(report), powers.ul * drop.active)
    return powers.with_dl(rho), dl_sinr_approx(report, rho)


Refresh = Callable[[NDArray[np.float64]], tuple[DualitySystem, T]]


def optimize_powers(
    refresh: Refresh[T],
    active: NDArray[np.bool_],
    weights: NDArray[np.float64],
    pmax: float,
    eps: float = DEFAULT_EPS,
    max_outer: int = MAX_OUTER_ITERATIONS,
    max_inner: int = MAX_INNER_ITERATIONS,
) -> tuple[PowerControlState, DualitySystem, T]:
    """Weighted sum-SE power control over uplink powers in [0, P_max].

    Starts from tau = P_max. Each outer pass calls `refresh(tau)` for the (F, D) of the
    current powers and runs the inner fixed point on them; the loop stops once the
    refreshed surrogate objective changes by at most `eps`.

    Returns:
        The loop state with its objective trace, and the system and payload of the last
        refresh (both describe the final powers)

    Raises:
        NonConvergenceError: if `max_outer` passes do not converge, or if the final
            sum SE is below the sum SE at the starting point
    """
    if pmax <= 0 or eps <= 0:
        raise ConfigurationError("pmax and eps must be positive")
    if not np.all(weights[active] > 0):
        raise ConfigurationError("weights of active users must be positive")

    state = PowerControlState(tau=pmax * active.astype(float), weights=weights, pmax=pmax)
    previous = None
    for outer in range(max_outer + 1):
        state.outer = outer
        system, payload = refresh(state.tau)

        flat_weights = system.flatten(weights)
        sinr = system.uplink_sinr(system.flatten(state.tau))
        surrogate = surrogate_objective(sinr, flat_weights)
        state.trace.append(TraceRow(outer, 0, surrogate, true_objective(sinr, flat_weights)))
        logger.debug("power_control_outer", outer=outer, surrogate=surrogate)

        if previous is not None and abs(surrogate - previous) <= eps:
            break
        if outer == max_outer:
            raise NonConvergenceError(
                f"power control did not converge in {max_outer} outer iterations",
                residual=abs(surrogate - previous) if previous is not None else None,
                trace=state.trace,
            )
        previous = surrogate
        state.tau = inner_iterations(system, state, eps, max_inner)

    initial, final = state.trace[0].objective, state.trace[-1].objective
    if final < initial - MONOTONICITY_TOLERANCE * max(abs(initial), 1.0):
        raise NonConvergenceError(
            f"power control lowered the weighted sum SE from {initial:.12g} to {final:.12g}",
            residual=initial - final,
            trace=state.trace,
        )
    return state, system, payload


def algorithm1(
    drop: UserDrop,
    link: LinkParams,
    pilot_power: NDArray[np.float64],
    weights: NDArray[np.float64],
    pmax: float,
    eps: float = DEFAULT_EPS,
    max_outer: int = MAX_OUTER_ITERATIONS,
    max_inner: int = MAX_INNER_ITERATIONS,
) -> tuple[PowerProfile, PowerControlState, DetEqReport]:
    """Maximize the weighted large-scale sum SE (long-term power control).

    (F, D) are refreshed from the large-scale approximation at the current powers.
    Downlink powers come from the duality transform of the final uplink powers.

    Returns:
        Power profile, the loop state with its objective trace, and the final report
        (uplink and downlink SINRs filled)
    """
    zeros = np.zeros_like(pilot_power, dtype=float)

    def refresh(tau: NDArray[np.float64]) -> tuple[DualitySystem, DetEqReport]:
        powers = PowerProfile(pilot=pilot_power, ul=tau, dl=zeros)
        report = ul_sinr_approx(drop, powers, compute_estimation_statistics(drop, powers, link), link)
        return build_duality_system(report), report

    state, system, report = optimize_powers(refresh, drop.active, weights, pmax, eps, max_outer, max_inner)
    logger.info(
        "power_control_converged",
        outer=state.outer,
        initial=state.trace[0].objective,
        final=state.trace[-1].objective,
    )
    rho = uplink_to_downlink(system, state.tau)
    powers = PowerProfile(pilot=pilot_power, ul=state.tau, dl=rho)
    return powers, state, dl_sinr_approx(report, rho)


def instantaneous_system(bank: FilterBank, est: ChannelEstimate, stats: EstimationStatistics) -> DualitySystem:
    """Duality system of one channel realization under the detectors in `bank`.

    Row (j, k) is the SINR of `montecarlo.uplink_sinr` divided through by ||g_jk||^2:
    D = |g^H hhat_jjk|^2 / ||g||^2 and F[(j, k), (l, m)] = |g^H hhat_jlm|^2 / ||g||^2
    (off the diagonal) + err_jlm, with noise sigma^2.

    Raises:
        UndefinedSinrError: if an active user has a zero detector
    """
    users = np.argwhere(est.active)
    cells, index = users[:, 0], users[:, 1]
    g = bank.g[cells, index]  # (N, M)
    norm2 = np.sum(np.abs(g) ** 2, axis=-1)
    if np.any(norm2 == 0):
        raise UndefinedSinrError("an active user has a zero detector")

    # [a, b]: estimate at the serving BS of row a of the channel of the user of column b
    seen = est.hhat[cells][:, cells, index]  # (N, N, M)
    gain = np.abs(np.einsum("am,abm->ab", g.conj(), seen)) ** 2 / norm2[:, None]
    D = np.diag(gain).copy()
    F = gain - np.diag(D) + stats.err[cells][:, cells, index]
    return DualitySystem(D=D, F=F, users=users, shape=est.active.shape, noise=stats.noise_power)


@dataclass(frozen=True)
class BlockPowers:
    """Short-term power control result of one coherence block, arrays of shape (L, K)."""

    tau: NDArray[np.float64]
    rho: NDArray[np.float64]
    ul_sinr: NDArray[np.float64]
    dl_sinr: NDArray[np.float64]
    outer: int


def short_term_block(
    drop: UserDrop,
    link: LinkParams,
    pilot_power: NDArray[np.float64],
    weights: NDArray[np.float64],
    pmax: float,
    rng_seed: int,
    index: int,
    eps: float = DEFAULT_EPS,
    max_outer: int = MAX_OUTER_ITERATIONS,
    max_inner: int = MAX_INNER_ITERATIONS,
) -> BlockPowers:
    """Power control on the instantaneous M-MMSE SINRs of realization `index`.

    The channel and its estimate are those Monte Carlo evaluation draws for the same
    (rng_seed, index). The estimate depends on the pilots only, so it is formed once;
    each outer pass rebuilds the M-MMSE detectors at the current powers.
    """
    start = PowerProfile(pilot=pilot_power, ul=pmax * drop.active, dl=np.zeros_like(pilot_power, dtype=float))
    chan = generate_channels(drop, link.antennas, rng_seed, index)
    est = estimate_channels(chan, drop, start, compute_estimation_statistics(drop, start, link), rng_seed, index)

    def refresh(tau: NDArray[np.float64]) -> tuple[DualitySystem, None]:
        powers = start.with_ul(tau)
        stats = compute_estimation_statistics(drop, powers, link)
        return instantaneous_system(m_mmse_detector(est, stats, powers), est, stats), None

    state, system, _ = optimize_powers(refresh, drop.active, weights, pmax, eps, max_outer, max_inner)
    rho = uplink_to_downlink(system, state.tau)
    return BlockPowers(
        tau=state.tau,
        rho=rho,
        ul_sinr=system.unflatten(system.uplink_sinr(system.flatten(state.tau))),
        dl_sinr=system.unflatten(system.downlink_sinr(system.flatten(rho))),
        outer=state.outer,
    )


@dataclass(frozen=True)
class _BlockTask:
    drop: UserDrop
    link: LinkParams
    pilot_power: NDArray[np.float64]
    weights: NDArray[np.float64]
    pmax: float
    rng_seed: int
    index: int
    eps: float


def _run_block(task: _BlockTask) -> BlockPowers:
    return short_term_block(
        task.drop, task.link, task.pilot_power, task.weights, task.pmax, task.rng_seed, task.index, task.eps
    )


def short_term_report(
    drop: UserDrop,
    link: LinkParams,
    pilot_power: NDArray[np.float64],
    weights: NDArray[np.float64],
    pmax: float,
    n_real: int,
    rng_seed: int,
    eps: float = DEFAULT_EPS,
    jobs: int = 1,
) -> SEReport:
    """Ergodic M-MMSE SE when power control is rerun in every coherence block.

    Downlink powers of each block come from the duality transform of that block's
    uplink powers, so both links reach the same per-block SINRs.
    """
    if n_real < 1:
        raise InsufficientSamplesError("n_real must be at least 1")
    tasks = [_BlockTask(drop, link, pilot_power, weights, pmax, rng_seed, index, eps) for index in range(n_real)]
    blocks = parallel_map(_run_block, tasks, jobs)
    ul = np.stack([block.ul_sinr for block in blocks])
    dl = np.stack([block.dl_sinr for block in blocks])
    logger.info("short_term_power_control", n_real=n_real, mean_outer=float(np.mean([b.outer for b in blocks])))

    K = drop.users_per_cell
    return SEReport(
        meta=RunMeta(
            scheme=str(Scheme.M_MMSE),
            antennas=link.antennas,
            users_per_cell=K,
            reuse_factor=link.pilot_length // K,
            seed=rng_seed,
            n_real=n_real,
        ),
        source="mc",
        link=link,
        active=np.asarray(drop.active),
        ul_rate=np.mean(np.log2(1.0 + ul), axis=0),
        dl_rate=np.mean(np.log2(1.0 + dl), axis=0),
        ul_sinr=ul,
        extras={"tau": np.stack([b.tau for b in blocks]), "rho": np.stack([b.rho for b in blocks])},
    )
