"""Population size estimation from zero-truncated count data with exposure."""

__version__ = "0.1.0"
