"""Continuous-filter convolutional networks for molecular energies and forces."""

__version__ = "0.1.0"
