"""Constrained scalar-state stochastic LQ control and mean-variance portfolio tools."""

__version__ = "0.1.0"
