"""RANSAC hypothesis plus optional refinement, as one call."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ransac, refine
from .geometry import Pose
from .p1p import BoundingBox3D
from .ransac import CorrespondenceSet, GroundScene, RansacConfig, RansacResult
from .refine import RobustConfig, ShapeModel

SOLVERS = ("p1p", "p3p")
REFINERS = ("none", "gn", "hre", "re")

# Lower bound on the unclamped MAD scale of the RE baseline; it only matters
# when residuals collapse to zero, where c = 0 would be undefined.
RE_MIN_SCALE = 1e-3


def parse_method(name: str) -> tuple[str, str]:
    """``"p1p+hre"`` -> ``("p1p", "hre")``; a bare solver means no refinement."""
    solver, _, refiner = name.lower().partition("+")
    refiner = refiner or "none"
    if solver not in SOLVERS or refiner not in REFINERS:
        raise ValueError(f"unknown method {name!r}; expected <{'|'.join(SOLVERS)}>[{'|'.join('+' + r for r in REFINERS[1:])}]")
    return solver, refiner


def method_name(solver: str, refiner: str) -> str:
    return solver if refiner == "none" else f"{solver}+{refiner}"


@dataclass
class Estimate:
    pose: Pose
    coeffs: np.ndarray
    inlier_ids: frozenset
    ransac: RansacResult


def make_solver(solver: str, box3d: BoundingBox3D | None):
    if solver == "p1p":
        if box3d is None:
            raise ValueError("the p1p solver needs the object's 3D box")
        return ransac.P1PSolver(box3d)
    return ransac.P3PSolver()


def run_hypothesis(
    corrs: CorrespondenceSet, scene: GroundScene, solver: str, box3d: BoundingBox3D | None, cfg: RansacConfig
) -> RansacResult:
    return ransac.run(corrs, scene, make_solver(solver, box3d), cfg)


def refine_hypothesis(
    corrs: CorrespondenceSet,
    scene: GroundScene,
    hyp: RansacResult,
    refiner: str,
    model: ShapeModel | None = None,
    robust: RobustConfig = RobustConfig(),
) -> Estimate:
    """Apply one refinement strategy to a RANSAC result.

    ``gn`` polishes on the RANSAC inliers with the mean shape; ``re`` runs
    IRLS on all correspondences with an unclamped MAD scale; ``hre`` runs the
    three-stage hierarchical estimator.  The last two also estimate shape
    coefficients when the model has a basis.
    """
    K = scene.K
    M = model.M if model is not None else 0
    if refiner == "none":
        return Estimate(hyp.pose, np.zeros(M), hyp.inlier_ids, hyp)
    if refiner == "gn":
        fit = refine.gauss_newton(
            corrs.subset(np.flatnonzero(hyp.inlier_mask)),
            K,
            hyp.pose,
            model=model,
            max_iters=robust.max_gn_iters,
            tol=robust.convergence_tol,
        )
        return Estimate(fit.pose, fit.coeffs, hyp.inlier_ids, hyp)
    if refiner == "re":
        fit = refine.irls_minimize(
            corrs,
            K,
            hyp.pose,
            refine.MadScale(RE_MIN_SCALE),
            model=model,
            optimize_shape=True,
            max_iters=robust.max_irls_iters,
            tol=robust.convergence_tol,
        )
        r = refine.reprojection_residuals(fit.pose, fit.coeffs, model, K, corrs)
        ids = frozenset(int(i) for i in corrs.ids[r < robust.tau1])
        return Estimate(fit.pose, fit.coeffs, ids, hyp)
    if refiner == "hre":
        res = refine.hre(corrs, K, hyp.pose, model=model, cfg=robust)
        return Estimate(res.pose, res.coeffs, res.inlier_ids, hyp)
    raise ValueError(f"unknown refiner {refiner!r}")


def estimate(
    corrs: CorrespondenceSet,
    scene: GroundScene,
    method: str = "p1p+hre",
    box3d: BoundingBox3D | None = None,
    model: ShapeModel | None = None,
    ransac_cfg: RansacConfig = RansacConfig(),
    robust: RobustConfig = RobustConfig(),
) -> Estimate:
    solver, refiner = parse_method(method)
    hyp = run_hypothesis(corrs, scene, solver, box3d, ransac_cfg)
    return refine_hypothesis(corrs, scene, hyp, refiner, model, robust)
