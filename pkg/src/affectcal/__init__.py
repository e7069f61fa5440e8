"""Calibration-aware affect prediction toolkit."""

__version__ = "0.1.0"
