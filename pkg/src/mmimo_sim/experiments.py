"""Parameter sweeps, CDF experiments and validation runs.

Every (grid point, drop) pair is an independent job. Jobs are mapped over a process pool
and their results are consumed in job order, so the CSV files do not depend on `jobs`.
"""

import csv
import json
import subprocess
from collections import defaultdict
from collections.abc import Iterable
from dataclasses import asdict, dataclass, field
from enum import StrEnum
from functools import lru_cache
from pathlib import Path
from typing import Any, TypeVar

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from mmimo_sim import seeding
from mmimo_sim.channel import PowerProfile
from mmimo_sim.config import SUPPORTED_REUSE_FACTORS, NetworkScenario
from mmimo_sim.deteq import DetEqReport, deteq_se_report
from mmimo_sim.errors import ConfigurationError, SimulationError
from mmimo_sim.filters import Scheme, ZMode
from mmimo_sim.logging import get_logger
from mmimo_sim.montecarlo import SEReport, mc_report
from mmimo_sim.parallel import parallel_map
from mmimo_sim.power import (
    PowerControlState,
    algorithm1,
    channel_inversion_powers,
    downlink_by_duality,
    equal_power_profile,
    load_weights,
    pmax_from_edge_snr,
    short_term_report,
)
from mmimo_sim.topology import UserDrop, apply_coverage_drop, build_topology, drop_users

logger = get_logger(__name__)


class PowerPolicy(StrEnum):
    EQUAL = "equal"
    INVERSION = "inversion"
    ALGO1 = "algo1"
    ALGO1_SHORT = "algo1-short"


class Evaluation(StrEnum):
    DETEQ = "deteq"
    MC = "mc"


class SweepSpec(BaseModel):
    """Grid, sample counts and power settings of an experiment.

    Field aliases are the keys used in sweep files.
    """

    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="forbid")

    schemes: list[Scheme] = Field(default_factory=lambda: list(Scheme))
    antenna_values: list[int] = Field(default_factory=lambda: [100], alias="M_values", min_length=1)
    users_values: list[int] = Field(default_factory=lambda: [10], alias="K_values", min_length=1)
    reuse_values: list[int] = Field(default_factory=lambda: [4], alias="beta_values", min_length=1)
    n_drops: int = Field(50, gt=0)
    n_real: int = Field(2000, gt=0)
    gamma_trials: int = Field(500, gt=0)
    power_policy: PowerPolicy = PowerPolicy.INVERSION
    rho_db: float = 0.0
    pmax_edge_snr_db: float = -3.0
    eps: float = Field(1e-4, gt=0)
    n_drop_users: int = Field(0, ge=0)
    z_mode: ZMode = ZMode.STATISTICAL
    weights: str = "uniform"
    seed: int | None = Field(None, ge=0)

    @field_validator("antenna_values", "users_values")
    @classmethod
    def _positive(cls, values: list[int]) -> list[int]:
        if any(v <= 0 for v in values):
            raise ValueError("grid values must be positive")
        return values

    @field_validator("reuse_values")
    @classmethod
    def _supported(cls, values: list[int]) -> list[int]:
        unsupported = sorted(set(values) - set(SUPPORTED_REUSE_FACTORS))
        if unsupported:
            raise ValueError(f"unsupported reuse factors {unsupported}; use {SUPPORTED_REUSE_FACTORS}")
        return values

    @field_validator("power_policy")
    @classmethod
    def _fixed_powers(cls, policy: PowerPolicy) -> PowerPolicy:
        if policy is PowerPolicy.ALGO1_SHORT:
            raise ValueError(f"{policy} sets powers per coherence block and is only available as a cdf policy")
        return policy

    def master_seed(self, scenario: NetworkScenario) -> int:
        return self.seed if self.seed is not None else getattr(scenario, "seed", 0)


class CdfSpec(SweepSpec):
    """Settings of the CDF experiment.

    `n_drop_users` weakest users leave every drop (9 of 190 gives 95% coverage) and
    each of `policies` is evaluated on what remains.
    """

    n_drop_users: int = Field(9, ge=0)
    policies: list[PowerPolicy] = Field(
        default_factory=lambda: [PowerPolicy.EQUAL, PowerPolicy.ALGO1], min_length=1
    )

    @field_validator("policies")
    @classmethod
    def _distinct(cls, policies: list[PowerPolicy]) -> list[PowerPolicy]:
        if len(set(policies)) != len(policies):
            raise ValueError("policies must be distinct")
        return policies


S = TypeVar("S", bound=SweepSpec)


def load_sweep(path: Path, model: type[S] = SweepSpec) -> S:
    """Read a sweep file into `model`; every failure is reported as a ConfigurationError."""
    try:
        return model.model_validate(json.loads(path.read_text()))
    except FileNotFoundError as e:
        raise ConfigurationError(f"sweep file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: not valid JSON ({e})") from e
    except ValidationError as e:
        raise ConfigurationError(f"{path}: {e}") from e


@lru_cache(maxsize=1)
def build_id() -> str:
    """Commit hash of the working tree, or "unknown" outside a git checkout."""
    try:
        result = subprocess.run(
            ["git", "rev-parse", "HEAD"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            check=True,
        )
        return result.stdout.strip()
    except (subprocess.CalledProcessError, FileNotFoundError):
        return "unknown"


@dataclass(frozen=True)
class GridPoint:
    antennas: int
    users_per_cell: int
    reuse_factor: int

    @property
    def pilot_length(self) -> int:
        return self.users_per_cell * self.reuse_factor


@dataclass(frozen=True)
class PolicyOutcome:
    powers: PowerProfile
    report: DetEqReport  # uplink and downlink large-scale SINRs at `powers`
    state: PowerControlState | None = None


def build_drop(scenario: NetworkScenario, point: GridPoint, drop_seed: int, n_drop_users: int = 0) -> tuple[NetworkScenario, UserDrop]:
    """Scenario of `point` and its user drop, identical for every M sharing (K, beta, seed)."""
    grid = scenario.with_grid(point.antennas, point.users_per_cell, point.reuse_factor)
    drop = drop_users(grid, build_topology(grid), drop_seed)
    if n_drop_users:
        drop = apply_coverage_drop(drop, n_drop_users)
    return grid, drop


def power_limits(scenario: NetworkScenario, spec: SweepSpec) -> tuple[float, float]:
    """(rho, P_max): the pilot received-power target and the payload power cap."""
    rho = 10 ** (spec.rho_db / 10) * scenario.noise_power
    return rho, pmax_from_edge_snr(scenario, spec.pmax_edge_snr_db)


def apply_policy(
    policy: PowerPolicy,
    scenario: NetworkScenario,
    drop: UserDrop,
    spec: SweepSpec,
    weights: NDArray[np.float64] | None = None,
) -> PolicyOutcome:
    """Uplink powers of `policy` with downlink powers from the duality transform.

    Raises:
        ConfigurationError: for a policy without one power profile per drop
    """
    link = scenario.link
    rho, pmax = power_limits(scenario, spec)
    match policy:
        case PowerPolicy.INVERSION:
            powers = channel_inversion_powers(drop, rho)
        case PowerPolicy.EQUAL:
            powers = equal_power_profile(drop, rho, pmax)
        case PowerPolicy.ALGO1:
            if weights is None:
                weights = load_weights(spec.weights, drop.active.shape)
            pilot = channel_inversion_powers(drop, rho).pilot
            powers, state, report = algorithm1(drop, link, pilot, weights, pmax, eps=spec.eps)
            return PolicyOutcome(powers=powers, report=report, state=state)
        case PowerPolicy.ALGO1_SHORT:
            raise ConfigurationError(f"{policy} has no single power profile per drop; use short_term_report")
    powers, report = downlink_by_duality(drop, powers, link)
    return PolicyOutcome(powers=powers, report=report)


@dataclass(frozen=True)
class SweepJob:
    scenario: NetworkScenario
    spec: SweepSpec
    point: GridPoint
    drop_index: int
    seed: int


@dataclass
class JobResult:
    job: SweepJob
    reports: list[SEReport] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)
    trace: list[dict[str, Any]] = field(default_factory=list)


def _jobs(scenario: NetworkScenario, spec: SweepSpec) -> list[SweepJob]:
    master = spec.master_seed(scenario)
    jobs = []
    for K in spec.users_values:
        for beta in spec.reuse_values:
            for M in spec.antenna_values:
                for drop_index in range(spec.n_drops):
                    jobs.append(
                        SweepJob(
                            scenario=scenario,
                            spec=spec,
                            point=GridPoint(M, K, beta),
                            drop_index=drop_index,
                            seed=seeding.job_seed(master, drop_index, K, beta),
                        )
                    )
    return jobs


def run_sweep_job(job: SweepJob) -> JobResult:
    """Evaluate every scheme of `job.spec` on one drop; failures are recorded, not raised."""
    result = JobResult(job=job)
    spec, point = job.spec, job.point
    try:
        grid, drop = build_drop(job.scenario, point, job.seed, spec.n_drop_users)
        outcome = apply_policy(spec.power_policy, grid, drop, spec)
    except SimulationError as e:
        result.failures.append(f"{type(e).__name__}: {e}")
        return result
    if outcome.state is not None:
        result.trace = [asdict(row) for row in outcome.state.trace]

    for scheme in spec.schemes:
        if scheme is Scheme.M_ZF and point.antennas <= point.pilot_length:
            logger.info("mzf_skipped", antennas=point.antennas, pilot_length=point.pilot_length)
            continue
        try:
            result.reports.append(
                mc_report(
                    scheme, grid.link, drop, outcome.powers, spec.n_real, job.seed,
                    gamma_trials=spec.gamma_trials, z_mode=spec.z_mode,
                )
            )
        except SimulationError as e:
            result.failures.append(f"{scheme}: {type(e).__name__}: {e}")
            logger.warning("grid_point_failed", scheme=str(scheme), drop=job.drop_index, error=str(e))
        if scheme is Scheme.M_MMSE:
            result.reports.append(deteq_se_report(outcome.report, grid.link, job.seed))
    return result


def _write_csv(path: Path, fieldnames: list[str], rows: Iterable[dict[str, Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    stamp = build_id()
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames + ["build_id"], lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "build_id": stamp})
    return path


def _fmt(value: float) -> str:
    return repr(float(value))


def _report_row(report: SEReport, drop_index: int) -> dict[str, Any]:
    meta = report.meta
    return {
        "scheme": meta.scheme,
        "source": report.source,
        "M": meta.antennas,
        "K": meta.users_per_cell,
        "beta": meta.reuse_factor,
        "seed": meta.seed,
        "drop": drop_index,
        "n_real": meta.n_real,
        "cell_sum_se": _fmt(report.cell_sum_se()),
        "user_avg_se": _fmt(report.user_avg_se()),
        "ul_sum_se": _fmt(report.ul_se.sum() / report.active.shape[0]),
        "dl_sum_se": _fmt(report.dl_se.sum() / report.active.shape[0]),
    }


def _user_rows(report: SEReport, drop_index: int) -> Iterable[dict[str, Any]]:
    meta = report.meta
    ul, dl, joint = report.ul_se, report.dl_se, report.joint_se
    for cell, user in np.ndindex(report.active.shape):
        yield {
            "scheme": meta.scheme,
            "source": report.source,
            "M": meta.antennas,
            "K": meta.users_per_cell,
            "beta": meta.reuse_factor,
            "drop": drop_index,
            "cell": cell,
            "user": user,
            "active": int(report.active[cell, user]),
            "ul_se": _fmt(ul[cell, user]),
            "dl_se": _fmt(dl[cell, user]),
            "joint_se": _fmt(joint[cell, user]),
        }


SWEEP_COLUMNS = ["scheme", "source", "M", "K", "beta", "seed", "drop", "n_real", "cell_sum_se", "user_avg_se", "ul_sum_se", "dl_sum_se"]
USER_COLUMNS = ["scheme", "source", "M", "K", "beta", "drop", "cell", "user", "active", "ul_se", "dl_se", "joint_se"]
CURVE_COLUMNS = ["scheme", "source", "M", "K", "beta", "n_drops", "mean_cell_sum_se"]
FAILURE_COLUMNS = ["M", "K", "beta", "drop", "error"]
TRACE_COLUMNS = ["policy", "drop", "outer_iter", "inner_iter", "R_surrogate", "R_true"]


@dataclass
class SweepOutcome:
    rows: list[dict[str, Any]]
    curves: list[dict[str, Any]]
    failures: list[dict[str, Any]]
    files: list[Path]

    @property
    def ok(self) -> bool:
        return not self.failures


def drop_averaged_curves(rows: list[dict[str, Any]]) -> list[dict[str, Any]]:
    """Mean cell-sum SE per (scheme, source, M, K, beta), in first-appearance order."""
    groups: dict[tuple, list[float]] = defaultdict(list)
    for row in rows:
        key = (row["scheme"], row["source"], row["M"], row["K"], row["beta"])
        groups[key].append(float(row["cell_sum_se"]))
    return [
        {
            "scheme": scheme,
            "source": source,
            "M": M,
            "K": K,
            "beta": beta,
            "n_drops": len(values),
            "mean_cell_sum_se": _fmt(np.mean(values)),
        }
        for (scheme, source, M, K, beta), values in groups.items()
    ]


def _failure_rows(result: JobResult) -> list[dict[str, Any]]:
    point = result.job.point
    return [
        {"M": point.antennas, "K": point.users_per_cell, "beta": point.reuse_factor, "drop": result.job.drop_index, "error": error}
        for error in result.failures
    ]


def run_sweep(scenario: NetworkScenario, spec: SweepSpec, out_dir: Path, workers: int = 1) -> SweepOutcome:
    """Monte Carlo (and large-scale, for M-MMSE) SE over the grid of `spec`."""
    jobs = _jobs(scenario, spec)
    logger.info("sweep_started", jobs=len(jobs), workers=workers, build=build_id())
    results = parallel_map(run_sweep_job, jobs, workers)

    rows, user_rows, failures, trace = [], [], [], []
    for result in results:
        drop_index = result.job.drop_index
        for report in result.reports:
            rows.append(_report_row(report, drop_index))
            user_rows.extend(_user_rows(report, drop_index))
        failures.extend(_failure_rows(result))
        trace.extend(
            {"policy": str(spec.power_policy), "drop": drop_index, **_trace_columns(row)} for row in result.trace
        )
    curves = drop_averaged_curves(rows)

    files = [
        _write_csv(out_dir / "sweep_rows.csv", SWEEP_COLUMNS, rows),
        _write_csv(out_dir / "sweep_users.csv", USER_COLUMNS, user_rows),
        _write_csv(out_dir / "sweep_curves.csv", CURVE_COLUMNS, curves),
        _write_csv(out_dir / "sweep_failures.csv", FAILURE_COLUMNS, failures),
    ]
    if trace:
        files.append(_write_csv(out_dir / "algo1_trace.csv", TRACE_COLUMNS, trace))
    logger.info("sweep_finished", rows=len(rows), failures=len(failures))
    return SweepOutcome(rows=rows, curves=curves, failures=failures, files=files)


def _trace_columns(row: dict[str, Any]) -> dict[str, Any]:
    return {
        "outer_iter": row["outer"],
        "inner_iter": row["inner"],
        "R_surrogate": _fmt(row["surrogate"]),
        "R_true": _fmt(row["objective"]),
    }


@dataclass(frozen=True)
class CdfReport:
    """Empirical distribution of SE samples, stored sorted."""

    label: str
    samples: NDArray[np.float64]

    @classmethod
    def from_samples(cls, label: str, values: Iterable[float]) -> "CdfReport":
        return cls(label=label, samples=np.sort(np.asarray(list(values), dtype=float)))

    def percentile(self, q: float) -> float:
        return float(np.percentile(self.samples, q))

    def rows(self) -> Iterable[dict[str, Any]]:
        n = len(self.samples)
        for i, value in enumerate(self.samples):
            yield {"policy": self.label, "se": _fmt(value), "probability": _fmt((i + 1) / n)}


@dataclass
class CdfJobResult:
    job: SweepJob
    user_se: dict[str, list[float]] = field(default_factory=dict)
    average_se: dict[str, float] = field(default_factory=dict)
    trace: list[dict[str, Any]] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)


def _policy_report(
    policy: PowerPolicy,
    grid: NetworkScenario,
    drop: UserDrop,
    job: SweepJob,
    weights: NDArray[np.float64],
    evaluation: Evaluation,
) -> tuple[SEReport, PowerControlState | None]:
    spec = job.spec
    if policy is PowerPolicy.ALGO1_SHORT:
        rho, pmax = power_limits(grid, spec)
        pilot = channel_inversion_powers(drop, rho).pilot
        report = short_term_report(drop, grid.link, pilot, weights, pmax, spec.n_real, job.seed, eps=spec.eps)
        return report, None

    outcome = apply_policy(policy, grid, drop, spec, weights)
    if evaluation is Evaluation.MC:
        report = mc_report(
            Scheme.M_MMSE, grid.link, drop, outcome.powers, spec.n_real, job.seed,
            gamma_trials=spec.gamma_trials, z_mode=spec.z_mode,
        )
    else:
        report = deteq_se_report(outcome.report, grid.link, job.seed)
    return report, outcome.state


def run_cdf_job(job: SweepJob, evaluation: Evaluation = Evaluation.DETEQ) -> CdfJobResult:
    """Every policy of `job.spec` on one drop; per-user and average joint SE.

    Short-term control is evaluated on the Monte Carlo realizations whatever `evaluation`
    says; they are the realizations `Evaluation.MC` uses for the other policies.
    """
    result = CdfJobResult(job=job)
    spec = job.spec
    try:
        grid, drop = build_drop(job.scenario, job.point, job.seed, spec.n_drop_users)
        weights = load_weights(spec.weights, drop.active.shape)
        for policy in spec.policies:
            report, state = _policy_report(policy, grid, drop, job, weights, evaluation)
            result.user_se[str(policy)] = report.joint_se[drop.active].tolist()
            result.average_se[str(policy)] = report.user_avg_se()
            if state is not None:
                result.trace.extend(
                    {"policy": str(policy), "drop": job.drop_index, **_trace_columns(asdict(row))}
                    for row in state.trace
                )
    except SimulationError as e:
        result.failures.append(f"{type(e).__name__}: {e}")
        logger.warning("cdf_drop_failed", drop=job.drop_index, error=str(e))
    return result


def _run_cdf_job_deteq(job: SweepJob) -> CdfJobResult:
    return run_cdf_job(job, Evaluation.DETEQ)


def _run_cdf_job_mc(job: SweepJob) -> CdfJobResult:
    return run_cdf_job(job, Evaluation.MC)


@dataclass
class CdfOutcome:
    users: dict[str, CdfReport]
    average: dict[str, CdfReport]
    failures: list[dict[str, Any]]
    files: list[Path]

    @property
    def ok(self) -> bool:
        return not self.failures


def run_cdf_experiment(
    scenario: NetworkScenario,
    spec: SweepSpec,
    out_dir: Path,
    workers: int = 1,
    evaluation: Evaluation = Evaluation.DETEQ,
) -> CdfOutcome:
    """CDFs over drops of per-user and network-average SE for each policy of `spec`.

    Uses the first (M, K, beta) of `spec`; `spec.n_drop_users` weakest users are removed
    from every drop before the policies run. A plain `SweepSpec` is read as a `CdfSpec`
    with the fields it sets explicitly, so unset ones take the CDF defaults.
    """
    if not isinstance(spec, CdfSpec):
        spec = CdfSpec.model_validate(spec.model_dump(exclude_unset=True))
    point = GridPoint(spec.antenna_values[0], spec.users_values[0], spec.reuse_values[0])
    master = spec.master_seed(scenario)
    jobs = [
        SweepJob(scenario, spec, point, d, seeding.job_seed(master, d, point.users_per_cell, point.reuse_factor))
        for d in range(spec.n_drops)
    ]
    labels = [str(p) for p in spec.policies]
    logger.info("cdf_started", drops=len(jobs), evaluation=str(evaluation), n_drop_users=spec.n_drop_users, policies=labels)
    fn = _run_cdf_job_mc if evaluation is Evaluation.MC else _run_cdf_job_deteq
    results = parallel_map(fn, jobs, workers)

    user_samples: dict[str, list[float]] = {p: [] for p in labels}
    average_samples: dict[str, list[float]] = {p: [] for p in labels}
    trace, failures = [], []
    for result in results:
        if result.failures:
            failures.extend(
                {"M": point.antennas, "K": point.users_per_cell, "beta": point.reuse_factor, "drop": result.job.drop_index, "error": error}
                for error in result.failures
            )
            continue
        for policy in labels:
            user_samples[policy].extend(result.user_se[policy])
            average_samples[policy].append(result.average_se[policy])
        trace.extend(result.trace)

    users = {p: CdfReport.from_samples(p, v) for p, v in user_samples.items()}
    average = {p: CdfReport.from_samples(p, v) for p, v in average_samples.items()}
    cdf_columns = ["policy", "se", "probability"]
    files = [
        _write_csv(out_dir / "cdf_users.csv", cdf_columns, (row for report in users.values() for row in report.rows())),
        _write_csv(out_dir / "cdf_average.csv", cdf_columns, (row for report in average.values() for row in report.rows())),
        _write_csv(out_dir / "sweep_failures.csv", FAILURE_COLUMNS, failures),
    ]
    if PowerPolicy.ALGO1 in spec.policies:
        files.append(_write_csv(out_dir / "algo1_trace.csv", TRACE_COLUMNS, trace))
    return CdfOutcome(users=users, average=average, failures=failures, files=files)


@dataclass(frozen=True)
class ValidationRow:
    antennas: int
    users_per_cell: int
    reuse_factor: int
    n_drops: int
    mean_rel_err: float
    max_rel_err: float


def validate_deteq(
    scenario: NetworkScenario,
    spec: SweepSpec,
    out_dir: Path,
    workers: int = 1,
) -> tuple[list[ValidationRow], list[dict[str, Any]]]:
    """Relative error between Monte Carlo and large-scale M-MMSE cell-sum SE per grid point."""
    spec = spec.model_copy(update={"schemes": [Scheme.M_MMSE]})
    results = parallel_map(run_sweep_job, _jobs(scenario, spec), workers)

    errors: dict[GridPoint, list[float]] = defaultdict(list)
    failures = []
    for result in results:
        failures.extend(_failure_rows(result))
        by_source = {report.source: report.cell_sum_se() for report in result.reports}
        if "mc" in by_source and "deteq" in by_source:
            errors[result.job.point].append(abs(by_source["mc"] - by_source["deteq"]) / by_source["mc"])

    table = [
        ValidationRow(
            antennas=point.antennas,
            users_per_cell=point.users_per_cell,
            reuse_factor=point.reuse_factor,
            n_drops=len(values),
            mean_rel_err=float(np.mean(values)),
            max_rel_err=float(np.max(values)),
        )
        for point, values in errors.items()
    ]
    _write_csv(
        out_dir / "deteq_validation.csv",
        ["M", "K", "beta", "n_drops", "mean_rel_err", "max_rel_err"],
        (
            {
                "M": row.antennas,
                "K": row.users_per_cell,
                "beta": row.reuse_factor,
                "n_drops": row.n_drops,
                "mean_rel_err": _fmt(row.mean_rel_err),
                "max_rel_err": _fmt(row.max_rel_err),
            }
            for row in table
        ),
    )
    _write_csv(out_dir / "sweep_failures.csv", FAILURE_COLUMNS, failures)
    return table, failures


@dataclass(frozen=True)
class DualityGap:
    point: GridPoint
    drop_index: int
    power_gap: float
    max_sinr_gap: float
    error: str | None = None


def duality_gap_job(job: SweepJob) -> DualityGap:
    """Total-power and per-user SINR gap of the duality transform on one drop."""
    try:
        grid, drop = build_drop(job.scenario, job.point, job.seed, job.spec.n_drop_users)
        outcome = apply_policy(job.spec.power_policy, grid, drop, job.spec)
    except SimulationError as e:
        return DualityGap(job.point, job.drop_index, np.nan, np.nan, error=f"{type(e).__name__}: {e}")

    active = drop.active
    report, rho = outcome.report, outcome.powers.dl
    total = float(np.sum(outcome.powers.ul[active]))
    ul, dl = report.ul_sinr[active], report.dl_sinr[active]
    return DualityGap(
        point=job.point,
        drop_index=job.drop_index,
        power_gap=abs(float(np.sum(rho[active])) - total) / total,
        max_sinr_gap=float(np.max(np.abs(dl - ul) / ul)),
    )


def duality_check(
    scenario: NetworkScenario,
    spec: SweepSpec,
    out_dir: Path,
    workers: int = 1,
) -> list[DualityGap]:
    """Run the duality transform on every drop of the grid and record both gaps."""
    gaps = parallel_map(duality_gap_job, _jobs(scenario, spec), workers)
    _write_csv(
        out_dir / "duality_check.csv",
        ["M", "K", "beta", "drop", "power_gap", "max_sinr_gap", "error"],
        (
            {
                "M": gap.point.antennas,
                "K": gap.point.users_per_cell,
                "beta": gap.point.reuse_factor,
                "drop": gap.drop_index,
                "power_gap": _fmt(gap.power_gap),
                "max_sinr_gap": _fmt(gap.max_sinr_gap),
                "error": gap.error or "",
            }
            for gap in gaps
        ),
    )
    return gaps
