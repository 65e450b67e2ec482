"""Deterministic equivalents for the M-MMSE detector and precoder.

`solve_theorem1` and `solve_theorem2` are the resolvent fixed point and its derivative for
B covariance descriptors. A descriptor set is either a (B,) vector of scalars c_b, meaning
R_b = c_b I_M (the production path; every estimate covariance is a scaled identity), or a
(B, M, M) stack of Hermitian matrices (the general path, used as a cross-check).
"""

from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import inv, solve

from mmimo_sim.channel import EstimationStatistics, PowerProfile
from mmimo_sim.config import LinkParams
from mmimo_sim.errors import NonConvergenceError
from mmimo_sim.logging import get_logger
from mmimo_sim.montecarlo import RunMeta, SEReport
from mmimo_sim.topology import UserDrop

logger = get_logger(__name__)

TOLERANCE = 1e-12
MAX_ITERATIONS = 10_000


@dataclass(frozen=True)
class FixedPointResult:
    """delta_b and T(rho). For scalar descriptors `T` is the scalar t with T = t I_M."""

    delta: NDArray[np.float64]
    T: float | NDArray[np.complex128]
    iterations: int
    residual: float
    history: NDArray[np.float64]
    antennas: int

    @property
    def normalized_trace(self) -> float:
        """(1/M) tr T."""
        if np.ndim(self.T) == 0:
            return float(self.T)
        return float(np.trace(self.T).real / self.antennas)


@dataclass(frozen=True)
class DerivativeResult:
    delta_prime: NDArray[np.float64]
    T_prime: float | NDArray[np.complex128]
    J: NDArray[np.float64]
    v: NDArray[np.float64]
    antennas: int

    @property
    def normalized_trace(self) -> float:
        """(1/M) tr T'."""
        if np.ndim(self.T_prime) == 0:
            return float(self.T_prime)
        return float(np.trace(self.T_prime).real / self.antennas)


def _is_scalar(R: NDArray) -> bool:
    return np.ndim(R) == 1


def solve_theorem1(
    R: NDArray,
    rho: float,
    antennas: int | None = None,
    tol: float = TOLERANCE,
    max_iter: int = MAX_ITERATIONS,
) -> FixedPointResult:
    """Iterate delta_b = (1/M) tr(R_b (1/M sum_j R_j / (1 + delta_j) + rho I)^-1) from 1/rho.

    Args:
        R: (B,) scalars c_b or (B, M, M) Hermitian matrices
        rho: Regularization, > 0
        antennas: M; required for scalar descriptors
        tol: Absolute tolerance on max |delta^(t) - delta^(t-1)|
        max_iter: Iteration cap

    Returns:
        Converged delta, T(rho) and the residual history

    Raises:
        NonConvergenceError: if the cap is reached first
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    scalar = _is_scalar(R)
    M = antennas if scalar else R.shape[-1]
    if M is None:
        raise ValueError("antennas is required for scalar descriptors")
    R = np.asarray(R)
    B = R.shape[0]

    delta = np.full(B, 1.0 / rho)
    history = []
    for iteration in range(1, max_iter + 1):
        if scalar:
            T = 1.0 / (np.sum(R / (1.0 + delta)) / M + rho)
            updated = R * T
        else:
            T = inv(np.tensordot(1.0 / (1.0 + delta), R, axes=1) / M + rho * np.eye(M))
            updated = np.einsum("bij,ji->b", R, T).real / M
        residual = float(np.max(np.abs(updated - delta))) if B else 0.0
        history.append(residual)
        delta = updated
        if residual < tol:
            return FixedPointResult(
                delta=delta,
                T=float(T) if scalar else T,
                iterations=iteration,
                residual=residual,
                history=np.array(history),
                antennas=M,
            )
    raise NonConvergenceError(
        f"fixed point did not reach {tol:g} in {max_iter} iterations",
        residual=history[-1],
        trace=history,
    )


def solve_theorem2(
    R: NDArray,
    theta: float | NDArray,
    rho: float,
    antennas: int | None = None,
    fixed_point: FixedPointResult | None = None,
    tol: float = TOLERANCE,
    max_iter: int = MAX_ITERATIONS,
) -> DerivativeResult:
    """T'(rho) for the perturbation Theta (a scalar theta means Theta = theta I_M).

    Raises:
        NonConvergenceError: if I - J is not invertible (spectral radius of J >= 1)
    """
    if fixed_point is None:
        fixed_point = solve_theorem1(R, rho, antennas, tol, max_iter)
    R = np.asarray(R)
    delta = fixed_point.delta
    M = fixed_point.antennas
    denom = (1.0 + delta) ** 2

    if _is_scalar(R):
        t = fixed_point.T
        if np.ndim(theta) != 0:
            raise ValueError("scalar descriptors take a scalar theta")
        J = np.outer(R, R) * t**2 / (M * denom[None, :])
        v = R * theta * t**2
    else:
        T = fixed_point.T
        Theta = theta * np.eye(M) if np.ndim(theta) == 0 else np.asarray(theta)
        RT = R @ T
        J = np.einsum("bij,lji->bl", RT, RT).real / M / (M * denom[None, :])
        TThetaT = T @ Theta @ T
        v = np.einsum("bij,ji->b", R, TThetaT).real / M

    if J.size:
        radius = float(np.max(np.abs(np.linalg.eigvals(J))))
        if radius >= 1.0:
            raise NonConvergenceError(f"spectral radius of J is {radius:.3g} >= 1", residual=radius)
        delta_prime = solve(np.eye(len(v)) - J, v)
    else:
        delta_prime = np.zeros(0)

    weights = delta_prime / denom
    if _is_scalar(R):
        T_prime = float(t**2 * theta + t**2 * np.sum(R * weights) / M)
    else:
        T_prime = TThetaT + T @ (np.tensordot(weights, R, axes=1) / M) @ T
    return DerivativeResult(delta_prime=delta_prime, T_prime=T_prime, J=J, v=v, antennas=M)


@dataclass(frozen=True)
class DetEqReport:
    """Large-scale quantities and SINR approximations of the M-MMSE scheme.

    Index conventions: `delta`, `theta_dprime`, `ul_sinr`, `dl_sinr` are [j, k] for user k
    served by BS j; `theta` is [j, l, m] (BS j, user (l, m)); `theta_prime` and `mu`
    are [j, k, l, m] for BS j's user k and the user (l, m) whose interference is weighed.
    """

    delta: NDArray[np.float64]
    theta: NDArray[np.float64]
    theta_prime: NDArray[np.float64]
    theta_dprime: NDArray[np.float64]
    mu: NDArray[np.float64]
    ul_sinr: NDArray[np.float64]
    dl_sinr: NDArray[np.float64] | None
    resolvent: NDArray[np.float64]  # (J,) t_j with T_j = t_j I
    lam_delta: NDArray[np.float64]  # (J, K): lambda_{j, i_jk} delta_jk
    gains: NDArray[np.float64]
    pilot_index: NDArray[np.int64]
    active: NDArray[np.bool_]
    pilot_power: NDArray[np.float64]
    ul_power: NDArray[np.float64]
    noise_power: float
    antennas: int

    @property
    def cells(self) -> int:
        return self.gains.shape[1]

    @property
    def users_per_cell(self) -> int:
        return self.gains.shape[2]

    def same_pilot(self) -> NDArray[np.bool_]:
        """[j, k, l, m]: user (l, m) reuses the pilot of (j, k) and is not (j, k)."""
        L, K = self.cells, self.users_per_cell
        same = self.pilot_index[:, :, None, None] == self.pilot_index[None, None, :, :]
        return same & ~np.eye(L * K, dtype=bool).reshape(L, K, L, K)

    def other_pilot(self) -> NDArray[np.bool_]:
        return self.pilot_index[:, :, None, None] != self.pilot_index[None, None, :, :]


def _serving(array: NDArray) -> NDArray:
    cells = np.arange(array.shape[0])
    return array[cells, cells]


def ul_sinr_approx(
    drop: UserDrop,
    powers: PowerProfile,
    stats: EstimationStatistics,
    link: LinkParams,
) -> DetEqReport:
    """Large-scale approximation of every user's uplink M-MMSE SINR."""
    powers = powers.masked(drop.active)
    M = link.antennas
    L, K = drop.pilot_index.shape
    pilots = drop.pilot_index
    d = stats.gains
    p, tau = powers.pilot, powers.ul
    phi_tilde = stats.phi_tilde  # (J, B)

    t = np.empty(L)
    t_dprime = np.empty(L)
    for j in range(L):
        rho = (stats.noise_power + stats.phi[j]) / M
        descriptors = stats.lam[j] * phi_tilde[j]
        fp = solve_theorem1(descriptors, rho, M)
        # Theta = I; T' is linear in Theta so other scaled identities follow by scaling
        t_dprime[j] = solve_theorem2(descriptors, 1.0, rho, fixed_point=fp).T_prime
        t[j] = fp.T
        logger.debug("fixed_point_converged", bs=j, iterations=fp.iterations, residual=fp.residual)

    phi_tilde_user = phi_tilde[:, pilots]  # (J, L, K): phi_tilde_{j, i_lm}
    lam_user = stats.lam[:, pilots]  # (J, L, K)
    theta = phi_tilde_user * t[:, None, None]  # theta_jlm
    delta = _serving(theta)  # delta_jk
    phi_tilde_served = _serving(phi_tilde_user)  # (J, K)
    t_prime_trace = phi_tilde_served * t_dprime[:, None]  # (1/M) tr T'_jk
    theta_dprime = t_prime_trace.copy()  # (1/M) tr(Phi_tilde_{j,i_jk} T''_jk), T'' = t'' I
    theta_prime = t_prime_trace[:, :, None, None] * phi_tilde_user[:, None, :, :]

    x = lam_user * theta  # lambda_{j, i_lm} theta_jlm
    shrink = (p[None] * d * lam_user * theta * (2.0 + x) / (1.0 + x) ** 2)[:, None, :, :]
    mu = t_prime_trace[:, :, None, None] - shrink * theta_prime

    report = DetEqReport(
        delta=delta,
        theta=theta,
        theta_prime=theta_prime,
        theta_dprime=theta_dprime,
        mu=mu,
        ul_sinr=np.zeros((L, K)),
        dl_sinr=None,
        resolvent=t,
        lam_delta=_serving(lam_user) * delta,
        gains=d,
        pilot_index=np.asarray(pilots),
        active=np.asarray(drop.active),
        pilot_power=p,
        ul_power=tau,
        noise_power=stats.noise_power,
        antennas=M,
    )
    return replace(report, ul_sinr=_ul_sinr(report))


def _ul_sinr(report: DetEqReport) -> NDArray[np.float64]:
    M = report.antennas
    d = report.gains
    p, tau = report.pilot_power, report.ul_power
    d_serving = _serving(d)
    delta2 = report.delta**2

    # d[j, l, m] broadcast over the receiving user k
    coherent = (tau * p)[None] * d**2
    same = np.einsum("jklm,jlm->jk", report.same_pilot().astype(float), coherent)
    other = np.einsum("jklm,jlm,jklm->jk", report.other_pilot().astype(float), tau[None] * d, report.mu) / M

    numerator = tau * p * d_serving**2 * delta2
    denominator = delta2 * same + other + report.noise_power / M * report.theta_dprime
    return np.where(report.active, numerator / denominator, 0.0)


def dl_sinr_approx(report: DetEqReport, dl_powers: NDArray[np.float64]) -> DetEqReport:
    """Large-scale approximation of the downlink M-MMSE SINR for powers `dl_powers`."""
    M = report.antennas
    rho = dl_powers * report.active
    p = report.pilot_power
    d = report.gains
    d_serving = _serving(d)
    weight = report.delta**2 / report.theta_dprime  # delta_lm^2 / theta''_lm

    # transmitter (l, m) at BS l towards receiver (j, k): gain d[l, j, k]
    same = np.einsum("jklm,ljk,lm->jk", report.same_pilot().astype(float), d**2, rho * weight)
    mu_swapped = np.transpose(report.mu, (2, 3, 0, 1))  # [j, k, l, m] holds mu[l, m, j, k]
    other = np.einsum("jklm,ljk,jklm,lm->jk", report.other_pilot().astype(float), d, mu_swapped, rho / report.theta_dprime) / M

    numerator = rho * p * d_serving**2 * weight
    denominator = p * same + other + report.noise_power / M
    sinr = np.where(report.active, numerator / denominator, 0.0)
    return replace(report, dl_sinr=sinr)


def gamma_approx(report: DetEqReport) -> NDArray[np.float64]:
    """Large-scale approximation of E{||g_jk||^2} for the M-MMSE detector."""
    p = report.pilot_power
    d_serving = _serving(report.gains)
    return p * d_serving**2 * report.theta_dprime / ((1.0 + report.lam_delta) ** 2 * report.antennas)


def deteq_se_report(report: DetEqReport, link: LinkParams, seed: int = 0) -> SEReport:
    """SEReport (source "deteq") from the uplink and, if present, downlink approximations."""
    K = report.users_per_cell
    meta = RunMeta(
        scheme="M-MMSE",
        antennas=link.antennas,
        users_per_cell=K,
        reuse_factor=link.pilot_length // K,
        seed=seed,
        n_real=0,
    )
    return SEReport(
        meta=meta,
        source="deteq",
        link=link,
        active=report.active,
        ul_rate=np.log2(1.0 + report.ul_sinr),
        dl_rate=None if report.dl_sinr is None else np.log2(1.0 + report.dl_sinr),
        ul_sinr=report.ul_sinr,
        dl_sinr=report.dl_sinr,
    )
