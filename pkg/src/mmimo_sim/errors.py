"""Exceptions raised by the simulator.

The CLI turns every `SimulationError` into a red error line and exit code 1.
"""

from typing import Any


class SimulationError(Exception):
    """Base class for all simulator failures."""


class ConfigurationError(SimulationError):
    """Invalid scenario, sweep or command-line configuration."""


class SamplingError(SimulationError):
    """Rejection sampling gave up before placing a user."""


class NonConvergenceError(SimulationError):
    """An iterative solver hit its iteration cap or became ill-posed."""

    def __init__(
        self,
        message: str,
        residual: float | None = None,
        trace: list[Any] | None = None,
    ) -> None:
        super().__init__(message)
        self.residual = residual
        self.trace = trace if trace is not None else []


class InfeasibleError(SimulationError):
    """Target SINRs cannot be met by any non-negative power vector."""

    def __init__(self, message: str, diagnostics: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InsufficientSamplesError(SimulationError):
    """Too few Monte Carlo samples for a well-defined estimate."""


class UndefinedSinrError(SimulationError):
    """SINR requested for a zero filter vector."""


class UnsupportedConfigurationError(SimulationError):
    """A filter cannot be built for this dimensioning (e.g. M-ZF with M <= B)."""


class MetadataMismatchError(SimulationError):
    """Two reports that should describe the same run do not."""


class IncompleteReportError(SimulationError):
    """A large-scale report lacks quantities required downstream."""
