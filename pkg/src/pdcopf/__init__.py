"""Parametric DC optimal power flow calibrated against AC-OPF."""

__version__ = "0.1.0"
