"""Object pose from one keypoint, a 2D box and a known ground plane."""

from .errors import (
    DegenerateGeometry,
    DegenerateRay,
    EmptyInput,
    InsufficientInliers,
    NonPositiveDepth,
    NoValidSolution,
    PoseError,
    SingularNormalEquations,
    ZeroEstimate,
)
from .geometry import GroundFrame, Intrinsics, Pose
from .p1p import BoundingBox2D, BoundingBox3D, CaseId
from .pipeline import Estimate, estimate
from .ransac import Correspondence, CorrespondenceSet, GroundScene, RansacConfig, RansacResult
from .refine import RefineResult, RobustConfig, ShapeModel
from .synthbench import SynthConfig, SynthScene, generate, run_experiment

__all__ = [
    "BoundingBox2D",
    "BoundingBox3D",
    "CaseId",
    "Correspondence",
    "CorrespondenceSet",
    "DegenerateGeometry",
    "DegenerateRay",
    "EmptyInput",
    "Estimate",
    "GroundFrame",
    "GroundScene",
    "InsufficientInliers",
    "Intrinsics",
    "NonPositiveDepth",
    "NoValidSolution",
    "Pose",
    "PoseError",
    "RansacConfig",
    "RansacResult",
    "RefineResult",
    "RobustConfig",
    "ShapeModel",
    "SingularNormalEquations",
    "SynthConfig",
    "SynthScene",
    "ZeroEstimate",
    "estimate",
    "generate",
    "run_experiment",
]
