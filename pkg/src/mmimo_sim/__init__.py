"""Multi-cell massive MIMO simulator."""

__version__ = "0.1.0"
