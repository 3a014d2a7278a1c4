"""Simulation and analytical models for bitmap-based reliability over lossy long-haul links."""

__version__ = "0.1.0"
