"""Stabilization rates, schemes and Monte Carlo checks for plants
controlled over Gaussian relay networks."""

__version__ = "0.1.0"
