"""Bayesian correction of multiplexed hardware performance counter samples."""

__version__ = "0.1.0"
