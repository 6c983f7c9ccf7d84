"""Topological derivatives for semilinear transmission problems with P1 finite elements."""

__version__ = "0.1.0"
