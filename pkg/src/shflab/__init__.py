"""Numerics for the critical 2d stochastic heat flow and its moments."""

__version__ = "0.1.0"
