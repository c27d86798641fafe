"""Behavioral simulator and readout analysis for a digital-based potentiostat."""

__version__ = "0.1.0"
