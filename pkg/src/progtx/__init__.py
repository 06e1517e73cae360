"""Adaptive progressive image transmission over simulated fading channels."""

__version__ = "0.1.0"
