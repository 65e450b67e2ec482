"""Structured logging configuration for mmimo-sim."""

import logging
from pathlib import Path

import structlog
from rich.console import Console

stderr = Console(stderr=True)

_run_log: Path | None = None


def setup_logging(log_file: Path, level: int = logging.INFO, *, append: bool = False) -> None:
    """Configure structlog for a simulation run.

    Args:
        log_file: Path to the JSON-lines run log
        level: Minimum level passed through by the bound loggers
        append: Add to an existing log instead of starting a new one (worker processes)
    """
    global _run_log
    mode = "a" if append else "w"

    # numpy/scipy report through the warnings module; keep them out of the terminal
    logging.basicConfig(
        level=logging.WARNING,
        format="%(asctime)s - %(process)d - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.FileHandler(log_file.with_suffix(".warnings.log"), mode=mode)],
        force=True,
    )
    logging.captureWarnings(True)

    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.JSONRenderer(),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(level),
        context_class=dict,
        logger_factory=structlog.PrintLoggerFactory(file=log_file.open(mode)),
        cache_logger_on_first_use=True,
    )
    _run_log = log_file

    if not append:
        stderr.print(f"[dim]📝 Logs: {log_file}[/dim]")


def run_log() -> Path | None:
    """Log file of the current run, or None before `setup_logging`."""
    return _run_log


def configure_worker(log_file: Path | None) -> None:
    """Pool initializer: send a worker's events to the parent's run log."""
    if log_file is not None:
        setup_logging(log_file, append=True)


def get_logger(name: str) -> structlog.BoundLogger:
    """Get a logger instance.

    Args:
        name: Logger name (typically __name__)

    Returns:
        Configured structlog logger
    """
    return structlog.get_logger(name)
