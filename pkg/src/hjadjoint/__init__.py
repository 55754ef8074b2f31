"""Finite-difference lab for penalized obstacle problems, weakly coupled
Hamilton-Jacobi systems, their cell problems and discrete adjoint measures."""

__version__ = "0.1.0"
