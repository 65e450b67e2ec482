"""CLI entry point for mmimo-sim."""

from pathlib import Path
from typing import Any, List, NoReturn, Optional, TypeVar

import typer
from pydantic import ValidationError
from rich.table import Table

from mmimo_sim.config import Home, ScenarioConfig, load_scenario
from mmimo_sim.errors import ConfigurationError, SimulationError
from mmimo_sim.experiments import (
    CdfSpec,
    Evaluation,
    PowerPolicy,
    SweepSpec,
    duality_check,
    load_sweep,
    run_cdf_experiment,
    run_sweep,
    validate_deteq,
)
from mmimo_sim.logging import get_logger, setup_logging, stderr

app = typer.Typer(help="mmimo-sim - multi-cell massive MIMO spectral efficiency simulator")

logger = get_logger(__name__)

DUALITY_TOLERANCE = 1e-9

ConfigOption = typer.Option(None, "--config", "-c", help="Scenario JSON file (default: XDG scenario.json)")
SweepOption = typer.Option(None, "--sweep", "-s", help="Sweep JSON file")
OutOption = typer.Option(Path("results"), "--out", "-o", help="Directory for result CSV files")
JobsOption = typer.Option(1, "--jobs", "-j", min=1, help="Worker processes")
SeedOption = typer.Option(None, "--seed", min=0, help="Master seed (overrides config and sweep)")
PolicyOption = typer.Option(None, "--power-policy", help="Uplink power policy")
PmaxOption = typer.Option(None, "--pmax-edge-snr-db", help="Cell-edge SNR defining P_max")
WeightsOption = typer.Option(None, "--weights", help="'uniform' or a text file with an L x K weight matrix")
EpsOption = typer.Option(None, "--eps", help="Power-control stopping threshold")
NRealOption = typer.Option(None, "--n-real", min=1, help="Channel realizations per drop")
NDropsOption = typer.Option(None, "--n-drops", min=1, help="User drops per grid point")


S = TypeVar("S", bound=SweepSpec)


def _prepare(
    config: Optional[Path],
    sweep: Optional[Path],
    model: type[S] = SweepSpec,
    **overrides: Any,
) -> tuple[ScenarioConfig, S]:
    """Set up logging and resolve the scenario and sweep, command-line values winning."""
    home = Home()
    setup_logging(home.log_file)

    scenario = load_scenario(config) if config is not None else home.default_scenario()
    spec = load_sweep(sweep, model) if sweep is not None else model()
    updates = {name: value for name, value in overrides.items() if value is not None}
    if updates:
        try:
            spec = model.model_validate({**spec.model_dump(), **updates})
        except ValidationError as e:
            raise ConfigurationError(f"invalid command-line option: {e}") from e
    stderr.print(f"[dim]Scenario: {scenario.cell_count} cells, r={scenario.cell_radius_m:g} m, seed={spec.master_seed(scenario)}[/dim]")
    logger.info("run_configured", scenario=scenario.model_dump(mode="json"), sweep=spec.model_dump(mode="json"))
    return scenario, spec


def _fail(message: str) -> NoReturn:
    stderr.print(f"[red]Error: {message}[/red]")
    raise typer.Exit(1)


def _report_failures(failures: list[dict[str, Any]]) -> None:
    if failures:
        stderr.print(f"[yellow]{len(failures)} job(s) failed; see sweep_failures.csv[/yellow]")
        for failure in failures[:5]:
            stderr.print(f"[dim]  M={failure['M']} K={failure['K']} beta={failure['beta']} drop={failure['drop']}: {failure['error']}[/dim]")
        raise typer.Exit(1)


@app.command()
def sweep(
    config: Optional[Path] = ConfigOption,
    sweep_file: Optional[Path] = SweepOption,
    out: Path = OutOption,
    jobs: int = JobsOption,
    seed: Optional[int] = SeedOption,
    power_policy: Optional[PowerPolicy] = PolicyOption,
    pmax_edge_snr_db: Optional[float] = PmaxOption,
    weights: Optional[str] = WeightsOption,
    eps: Optional[float] = EpsOption,
    n_real: Optional[int] = NRealOption,
    n_drops: Optional[int] = NDropsOption,
):
    """Sum SE of every scheme over the (M, K, beta) grid."""
    try:
        scenario, spec = _prepare(
            config, sweep_file, seed=seed, power_policy=power_policy, pmax_edge_snr_db=pmax_edge_snr_db,
            weights=weights, eps=eps, n_real=n_real, n_drops=n_drops,
        )
        stderr.print(f"🚀 Running sweep ({jobs} worker(s))...")
        outcome = run_sweep(scenario, spec, out, jobs)
    except SimulationError as e:
        _fail(str(e))

    table = Table(title=f"Drop-averaged sum SE per cell ({spec.power_policy} power)")
    table.add_column("Scheme", style="cyan")
    table.add_column("Source", style="dim")
    table.add_column("M", justify="right")
    table.add_column("K", justify="right")
    table.add_column("β", justify="right")
    table.add_column("Drops", justify="right")
    table.add_column("SE [bit/s/Hz/cell]", justify="right", style="green")
    for curve in outcome.curves:
        table.add_row(
            curve["scheme"], curve["source"], str(curve["M"]), str(curve["K"]), str(curve["beta"]),
            str(curve["n_drops"]), f"{float(curve['mean_cell_sum_se']):.3f}",
        )
    stderr.print(table)
    stderr.print(f"[green]✓ Wrote {len(outcome.files)} file(s) to {out}[/green]")
    _report_failures(outcome.failures)


@app.command()
def cdf(
    config: Optional[Path] = ConfigOption,
    sweep_file: Optional[Path] = SweepOption,
    out: Path = OutOption,
    jobs: int = JobsOption,
    seed: Optional[int] = SeedOption,
    pmax_edge_snr_db: Optional[float] = PmaxOption,
    weights: Optional[str] = WeightsOption,
    eps: Optional[float] = EpsOption,
    n_real: Optional[int] = NRealOption,
    n_drops: Optional[int] = NDropsOption,
    evaluation: Evaluation = typer.Option(Evaluation.DETEQ, "--evaluation", help="How SE is evaluated per drop"),
    n_drop_users: Optional[int] = typer.Option(None, "--n-drop-users", min=0, help="Weakest users removed from every drop (default 9)"),
    policies: Optional[List[PowerPolicy]] = typer.Option(
        None, "--policy", help="Policy to compare; repeat for several (default: equal and algo1)"
    ),
):
    """CDFs of per-user and average SE: equal power vs. sum-SE power control."""
    try:
        scenario, spec = _prepare(
            config, sweep_file, CdfSpec, seed=seed, pmax_edge_snr_db=pmax_edge_snr_db, weights=weights,
            eps=eps, n_real=n_real, n_drops=n_drops, n_drop_users=n_drop_users, policies=policies or None,
        )
        stderr.print(f"🚀 Running CDF experiment on {spec.n_drops} drop(s)...")
        outcome = run_cdf_experiment(scenario, spec, out, jobs, evaluation)
    except SimulationError as e:
        _fail(str(e))

    table = Table(title=f"SE percentiles over {spec.n_drops} drop(s) [bit/s/Hz]")
    table.add_column("Policy", style="cyan")
    table.add_column("Samples", style="dim")
    table.add_column("5%", justify="right")
    table.add_column("50%", justify="right", style="green")
    table.add_column("95%", justify="right")
    for kind, reports in (("per user", outcome.users), ("average", outcome.average)):
        for policy, report in reports.items():
            if len(report.samples) == 0:
                continue
            table.add_row(
                f"{policy} ({kind})", str(len(report.samples)),
                f"{report.percentile(5):.3f}", f"{report.percentile(50):.3f}", f"{report.percentile(95):.3f}",
            )
    stderr.print(table)

    equal = outcome.average.get(PowerPolicy.EQUAL)
    if equal is not None and len(equal.samples):
        for policy, report in outcome.average.items():
            if policy != PowerPolicy.EQUAL and len(report.samples):
                gain = report.percentile(50) / equal.percentile(50) - 1.0
                stderr.print(f"Median average-user SE gain of {policy} over equal power: [bold]{gain:+.1%}[/bold]")
    _report_failures(outcome.failures)


@app.command("validate-deteq")
def validate_deteq_command(
    config: Optional[Path] = ConfigOption,
    sweep_file: Optional[Path] = SweepOption,
    out: Path = OutOption,
    jobs: int = JobsOption,
    seed: Optional[int] = SeedOption,
    power_policy: Optional[PowerPolicy] = PolicyOption,
    n_real: Optional[int] = NRealOption,
    n_drops: Optional[int] = NDropsOption,
):
    """Relative error of the large-scale M-MMSE approximation against Monte Carlo."""
    try:
        scenario, spec = _prepare(config, sweep_file, seed=seed, power_policy=power_policy, n_real=n_real, n_drops=n_drops)
        stderr.print("🔍 Comparing large-scale approximation with Monte Carlo...")
        rows, failures = validate_deteq(scenario, spec, out, jobs)
    except SimulationError as e:
        _fail(str(e))

    table = Table(title="M-MMSE cell-sum SE: |MC - approximation| / MC")
    table.add_column("M", justify="right")
    table.add_column("K", justify="right")
    table.add_column("β", justify="right")
    table.add_column("Drops", justify="right")
    table.add_column("Mean", justify="right", style="green")
    table.add_column("Max", justify="right", style="yellow")
    for row in rows:
        table.add_row(
            str(row.antennas), str(row.users_per_cell), str(row.reuse_factor), str(row.n_drops),
            f"{row.mean_rel_err:.2%}", f"{row.max_rel_err:.2%}",
        )
    stderr.print(table)
    _report_failures(failures)


@app.command("duality-check")
def duality_check_command(
    config: Optional[Path] = ConfigOption,
    sweep_file: Optional[Path] = SweepOption,
    out: Path = OutOption,
    jobs: int = JobsOption,
    seed: Optional[int] = SeedOption,
    power_policy: Optional[PowerPolicy] = PolicyOption,
    pmax_edge_snr_db: Optional[float] = PmaxOption,
    weights: Optional[str] = WeightsOption,
    eps: Optional[float] = EpsOption,
    n_drops: Optional[int] = NDropsOption,
):
    """Total-power and per-user SINR gaps of the uplink-to-downlink transform."""
    try:
        scenario, spec = _prepare(
            config, sweep_file, seed=seed, power_policy=power_policy, pmax_edge_snr_db=pmax_edge_snr_db,
            weights=weights, eps=eps, n_drops=n_drops,
        )
        gaps = duality_check(scenario, spec, out, jobs)
    except SimulationError as e:
        _fail(str(e))

    table = Table(title="Uplink-downlink duality")
    table.add_column("M", justify="right")
    table.add_column("K", justify="right")
    table.add_column("β", justify="right")
    table.add_column("Drop", justify="right")
    table.add_column("Power gap", justify="right")
    table.add_column("Max SINR gap", justify="right")
    failed = 0
    for gap in gaps:
        if gap.error is not None:
            failed += 1
            table.add_row(str(gap.point.antennas), str(gap.point.users_per_cell), str(gap.point.reuse_factor), str(gap.drop_index), "[red]error[/red]", gap.error)
            continue
        bad = max(gap.power_gap, gap.max_sinr_gap) > DUALITY_TOLERANCE
        failed += bad
        style = "red" if bad else "green"
        table.add_row(
            str(gap.point.antennas), str(gap.point.users_per_cell), str(gap.point.reuse_factor), str(gap.drop_index),
            f"[{style}]{gap.power_gap:.2e}[/{style}]", f"[{style}]{gap.max_sinr_gap:.2e}[/{style}]",
        )
    stderr.print(table)
    if failed:
        _fail(f"{failed} drop(s) exceed the duality tolerance {DUALITY_TOLERANCE:g} or failed")
    stderr.print("[green]✓ Duality holds on every drop[/green]")
