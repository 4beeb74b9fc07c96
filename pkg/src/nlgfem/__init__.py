"""Galerkin and two-grid nonlinear Galerkin finite elements for 2D Navier-Stokes."""
from .fem import ElementKind
from .mesh import MeshFamily, TriMesh, refine_uniform, unit_square_mesh
from .schemes import FlowState, FlowSystem, Scheme, SchemeConfig, TimeRule, run
from .twogrid import TwoGridHierarchy

__version__ = "0.1.0"

__all__ = [
    "ElementKind",
    "FlowState",
    "FlowSystem",
    "MeshFamily",
    "Scheme",
    "SchemeConfig",
    "TimeRule",
    "TriMesh",
    "TwoGridHierarchy",
    "refine_uniform",
    "run",
    "unit_square_mesh",
]
