"""Stochastic electromechanical bidomain simulation on 2D triangle meshes.

Subpackages: mesh generation and IO, finite element core, pointwise
constitutive laws, reproducible noise, the electric and mechanic solvers,
the coupled driver, runtime diagnostics, and the command-line front end.
"""

from .driver import SimConfig, SimResult, run_ensemble, run_simulation
from .mesh import FiberField, TriMesh, load_mesh, structured_unit_square

__all__ = [
    "SimConfig",
    "SimResult",
    "run_simulation",
    "run_ensemble",
    "TriMesh",
    "FiberField",
    "load_mesh",
    "structured_unit_square",
]

__version__ = "0.1.0"
