"""Numerical toolkit for threshold solutions of the radial energy-critical inhomogeneous NLS."""
from __future__ import annotations

__version__ = "0.1.0"

from .grid import (GridMismatchError, ParameterError, Params, RadialField, RadialGrid, grad_norm_sq,
                   inner_h1, inner_l2, make_grid, mass)
from .groundstate import (GroundStateBundle, elliptic_residual, energy, ground_state, kernel_residuals,
                          pohozhaev_residual, sharp_inequality_check)

__all__ = [
    "GridMismatchError", "ParameterError", "Params", "RadialField", "RadialGrid", "grad_norm_sq",
    "inner_h1", "inner_l2", "make_grid", "mass", "GroundStateBundle", "elliptic_residual", "energy",
    "ground_state", "kernel_residuals", "pohozhaev_residual", "sharp_inequality_check",
]
