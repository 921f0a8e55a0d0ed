"""Pseudospectral toolkit for blow-up of the L2-critical fractional NLS in 1D."""

__version__ = "0.1.0"
