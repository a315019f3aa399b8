"""Preconditioned integral-equation solvers for 2D point-scatterer problems."""

__version__ = "0.1.0"
