"""Numerical laboratory for multiple-end solutions of the Allen-Cahn equation
Delta u = F'(u) in the plane: 1D layers, 2D relaxation, conserved-quantity
checks and level-set analysis."""
from __future__ import annotations

__version__ = "0.1.0"

from .errors import (AclabError, ConfigurationError, GeometryError, InsufficientDataError,
                     InvalidInputError, SolverError)
from .potential import Potential
from .profile1d import Profile1D, energy_1d, solve_profile
from .solver2d import (FourEnd, Field2D, HalfPlane, MultiEnd, Planar, SolveConfig,
                       build_boundary, read_snapshot, relax, residual, solve, write_snapshot)

__all__ = [
    "__version__", "AclabError", "ConfigurationError", "GeometryError", "InsufficientDataError",
    "InvalidInputError", "SolverError", "Potential", "Profile1D", "energy_1d", "solve_profile",
    "FourEnd", "Field2D", "HalfPlane", "MultiEnd", "Planar", "SolveConfig", "build_boundary",
    "read_snapshot", "relax", "residual", "solve", "write_snapshot",
]
