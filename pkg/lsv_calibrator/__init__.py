"""Exact calibration of local-stochastic volatility models by dual optimal transport."""

__version__ = "0.1.0"
