"""Tests for the simulate CLI."""

import json

import pytest
from typer.testing import CliRunner

from mmimo_sim import main
from mmimo_sim.config import Home

runner = CliRunner()


@pytest.fixture
def files(tmp_path, monkeypatch):
    """Sandboxed home plus a small scenario and sweep file."""
    monkeypatch.setattr(main, "Home", lambda: Home.sandbox(tmp_path / "home"))
    config = tmp_path / "scenario.json"
    config.write_text(json.dumps({"K": 2, "beta": 1, "M": 4, "seed": 1}))
    sweep = tmp_path / "sweep.json"
    sweep.write_text(
        json.dumps({"M_values": [4], "K_values": [2], "beta_values": [1], "n_drops": 1, "n_real": 100, "gamma_trials": 10})
    )
    return config, sweep, tmp_path / "out"


def test_sweep_command(files):
    config, sweep, out = files
    result = runner.invoke(main.app, ["sweep", "-c", str(config), "-s", str(sweep), "-o", str(out)])
    assert result.exit_code == 0
    assert (out / "sweep_rows.csv").exists()
    assert (out / "sweep_curves.csv").exists()


def test_duality_check_command(files):
    config, sweep, out = files
    result = runner.invoke(main.app, ["duality-check", "-c", str(config), "-s", str(sweep), "-o", str(out)])
    assert result.exit_code == 0
    assert (out / "duality_check.csv").exists()


def test_bad_config_exits_with_error(files, tmp_path):
    _, sweep, out = files
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"beta": 5}))
    result = runner.invoke(main.app, ["sweep", "-c", str(config), "-s", str(sweep), "-o", str(out)])
    assert result.exit_code == 1


def test_invalid_override_exits_with_error(files):
    config, sweep, out = files
    result = runner.invoke(main.app, ["sweep", "-c", str(config), "-s", str(sweep), "-o", str(out), "--eps", "-1"])
    assert result.exit_code == 1


def test_cdf_command_with_policies(files):
    config, sweep, out = files
    result = runner.invoke(
        main.app,
        ["cdf", "-c", str(config), "-s", str(sweep), "-o", str(out), "--evaluation", "mc",
         "--policy", "equal", "--policy", "algo1-short"],
    )
    assert result.exit_code == 0
    users = (out / "cdf_users.csv").read_text()
    assert "algo1-short" in users
    assert "algo1," not in users
    assert not (out / "algo1_trace.csv").exists()


def test_short_term_policy_is_rejected_by_sweep(files):
    config, sweep, out = files
    result = runner.invoke(
        main.app, ["sweep", "-c", str(config), "-s", str(sweep), "-o", str(out), "--power-policy", "algo1-short"]
    )
    assert result.exit_code == 1
