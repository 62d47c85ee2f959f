"""Estimation and inference for IV regressions with a shifting structural equation."""

__version__ = "0.1.0"
