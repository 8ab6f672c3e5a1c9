"""Directional preconditioner for 2D high-frequency obstacle scattering."""

from .assembly import assemble_cfie, evaluate_field, plane_wave_rhs, point_source_rhs
from .compression import DirectionalApprox, build_directional_approx
from .geometry import BoundaryCurve, Discretization, build_curve, discretize
from .krylov import SolveReport, gmres
from .preconditioner import PreconditionerState, build_preconditioner
from .segmentation import SegmentList, build_segments
from .special import hankel01, hankel1

__all__ = [
    "BoundaryCurve",
    "DirectionalApprox",
    "Discretization",
    "PreconditionerState",
    "SegmentList",
    "SolveReport",
    "assemble_cfie",
    "build_curve",
    "build_directional_approx",
    "build_preconditioner",
    "build_segments",
    "discretize",
    "evaluate_field",
    "gmres",
    "hankel01",
    "hankel1",
    "plane_wave_rhs",
    "point_source_rhs",
]
__version__ = "0.1.0"
