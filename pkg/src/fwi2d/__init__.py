"""Acoustic full waveform inversion on 2D triangular meshes.

The package couples a staggered (leapfrog) time stepper for the damped
first-order acoustic system with piecewise-linear pressure elements and
piecewise-constant flux/parameter fields.  On top of the forward solver it
provides the discrete misfit functional, its exact discrete-adjoint
gradient, and a projected-gradient loop that recovers the square-slowness
field under box constraints.  The ``verify`` module holds independent
oracles (dense re-implementation, finite differences) and refinement-sweep
drivers used by the acceptance suite.
"""

from .mesh import TriMesh, load_mesh, save_mesh, refine_uniform, structured_square
from .fem import P1Space
from .forward import Scenario, Trajectory, cfl_check, run_forward, stability_report
from .inverse import ParamField, project_box

__all__ = [
    "TriMesh",
    "load_mesh",
    "save_mesh",
    "refine_uniform",
    "structured_square",
    "P1Space",
    "Scenario",
    "Trajectory",
    "cfl_check",
    "run_forward",
    "stability_report",
    "ParamField",
    "project_box",
]

__version__ = "0.1.0"
