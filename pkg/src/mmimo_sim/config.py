"""Scenario configuration and XDG home directories."""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from xdg_base_dirs import xdg_config_home, xdg_state_home

from mmimo_sim.errors import ConfigurationError

SUPPORTED_REUSE_FACTORS = (1, 3, 4, 7)


@dataclass(frozen=True)
class LinkParams:
    """Dimensioning consumed by the numerical modules.

    Kept separate from `NetworkScenario` so channel, filter and SINR code can be driven
    with any number of cells, users and pilots (tests use two-cell toy networks).
    """

    antennas: int
    pilot_length: int
    noise_power: float = 1.0
    coherence_symbols: int = 1000
    ul_fraction: float = 0.5

    @property
    def prelog(self) -> float:
        return 1.0 - self.pilot_length / self.coherence_symbols

    @property
    def dl_fraction(self) -> float:
        return 1.0 - self.ul_fraction


class NetworkScenario(BaseModel):
    """Static geometry, pilot reuse and physical constants of a run.

    Each field accepts the short config-file key (its alias) or its descriptive name.
    """

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    cell_count: Literal[19] = Field(19, alias="cells")
    cell_radius_m: float = Field(500.0, gt=0, alias="radius_m")
    pathloss_exponent: float = Field(3.7, gt=0, alias="kappa")
    shadow_variance_db: float = Field(5.0, ge=0, alias="shadow_var_db")
    reuse_factor: int = Field(4, alias="beta")
    users_per_cell: int = Field(10, gt=0, alias="K")
    antennas: int = Field(100, gt=0, alias="M")
    coherence_symbols: int = Field(1000, gt=0, alias="S")
    ul_fraction: float = Field(0.5, gt=0, lt=1, alias="zeta_ul")
    noise_power: float = Field(1.0, gt=0)
    min_distance_fraction: float = Field(0.14, gt=0, lt=0.8)
    shadow_per_link: bool = False

    @model_validator(mode="after")
    def _check_frame(self) -> "NetworkScenario":
        if self.reuse_factor not in SUPPORTED_REUSE_FACTORS:
            raise ValueError(
                f"beta={self.reuse_factor} has no symmetric coloring; use one of {SUPPORTED_REUSE_FACTORS}"
            )
        if self.pilot_length > self.coherence_symbols:
            raise ValueError(f"pilot length B={self.pilot_length} exceeds coherence block S={self.coherence_symbols}")
        data_symbols = self.coherence_symbols - self.pilot_length
        for name, fraction in (("uplink", self.ul_fraction), ("downlink", 1.0 - self.ul_fraction)):
            share = fraction * data_symbols
            if round(share) < 1 or abs(share - round(share)) > 1e-9:
                raise ValueError(f"{name} share {share:g} of the S-B={data_symbols} data symbols is not a positive integer")
        return self

    @property
    def pilot_length(self) -> int:
        return self.reuse_factor * self.users_per_cell

    @property
    def prelog(self) -> float:
        return 1.0 - self.pilot_length / self.coherence_symbols

    @property
    def dl_fraction(self) -> float:
        return 1.0 - self.ul_fraction

    @property
    def link(self) -> LinkParams:
        return LinkParams(
            antennas=self.antennas,
            pilot_length=self.pilot_length,
            noise_power=self.noise_power,
            coherence_symbols=self.coherence_symbols,
            ul_fraction=self.ul_fraction,
        )

    def with_grid(self, antennas: int, users_per_cell: int, reuse_factor: int) -> "NetworkScenario":
        """Copy with a new (M, K, beta) grid point; the copy is validated again."""
        data = self.model_dump()
        data.update(antennas=antennas, users_per_cell=users_per_cell, reuse_factor=reuse_factor)
        return type(self).model_validate(data)


class ScenarioConfig(NetworkScenario):
    """Scenario as read from a config file, including the master seed."""

    model_config = ConfigDict(frozen=True, populate_by_name=True, extra="forbid")

    seed: int = Field(0, ge=0)


def load_scenario(path: Path) -> ScenarioConfig:
    """Read a scenario file; every failure is reported as a ConfigurationError."""
    try:
        data = json.loads(path.read_text())
        return ScenarioConfig.model_validate(data)
    except FileNotFoundError as e:
        raise ConfigurationError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path}: not valid JSON ({e})") from e
    except ValidationError as e:
        raise ConfigurationError(f"{path}: {e}") from e



APP_DIR = "mmimo-sim"


@dataclass
class Home:
    """Where the simulator looks for its default scenario and writes its run log.

    `config` holds scenario.json, used when no --config is given. `state` holds the
    JSON-lines log of the latest run and its warnings sidecar.
    """

    config: Path = xdg_config_home() / APP_DIR
    state: Path = xdg_state_home() / APP_DIR

    def __post_init__(self) -> None:
        for directory in (self.config, self.state):
            directory.mkdir(parents=True, exist_ok=True)

    @classmethod
    def sandbox(cls, parent: Path | str) -> "Home":
        """Home rooted under `parent` instead of the XDG base directories."""
        root = Path(parent)
        return cls(config=root / "config" / APP_DIR, state=root / "state" / APP_DIR)

    @property
    def scenario_file(self) -> Path:
        return self.config / "scenario.json"

    @property
    def log_file(self) -> Path:
        return self.state / f"{APP_DIR}.log"

    def default_scenario(self) -> ScenarioConfig:
        """The scenario in scenario.json.

        A missing file is created with the reference scenario. An unreadable one is left
        in place and the reference scenario is used for this run.
        """
        if not self.scenario_file.exists():
            scenario = ScenarioConfig()
            self.save_scenario(scenario)
            return scenario
        try:
            return load_scenario(self.scenario_file)
        except ConfigurationError:
            return ScenarioConfig()

    def save_scenario(self, scenario: ScenarioConfig) -> None:
        """Write `scenario` with the config-file keys."""
        self.scenario_file.write_text(scenario.model_dump_json(indent=2, by_alias=True))
