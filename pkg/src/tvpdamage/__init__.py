"""Desk-scale simulator for a thermoviscoelastoplastic damage system with runtime audits."""

from .constitutive import MaterialModel
from .mesh_fem import build_mesh
from .problem import Profile, ProblemData, Term
from .stepper import DiscreteTrajectory, StepFailure, run

__all__ = ["MaterialModel", "build_mesh", "Profile", "ProblemData", "Term",
           "DiscreteTrajectory", "StepFailure", "run"]
__version__ = "0.1.0"
