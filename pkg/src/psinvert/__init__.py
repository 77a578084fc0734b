"""Stochastic inversion of process-structure-property links."""

__version__ = "0.1.0"
