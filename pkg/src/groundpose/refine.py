"""Robust pose (and shape) refinement.

Residuals are pixel reprojection errors of model points ``X_i(lambda) =
mean_i + sum_j lambda_j * basis_j,i`` under a camera-from-object pose.  Poses
are updated on the left, ``R <- exp(dw) R`` and ``t <- t + dt``, so the
optimization vector is ``[dw (3), dt (3), dlambda (M)]``.

Both the robust (Tukey IRLS) and plain least-squares solvers take damped
Gauss-Newton steps; a step is accepted only if it does not increase the
objective evaluated with the scale frozen for that iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Union

import numpy as np

from .errors import EmptyInput, InsufficientInliers, SingularNormalEquations
from .geometry import Intrinsics, Pose, hat
from .ransac import Correspondence, CorrespondenceSet

TUKEY_C = 4.685
MAD_NORMAL = 0.6745


@dataclass(frozen=True)
class ShapeModel:
    """Linear shape model; ``basis`` has shape (M, N, 3), M may be zero."""

    mean: np.ndarray
    basis: np.ndarray = None
    class_name: str = ""

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1, 3)
        basis = np.zeros((0, len(mean), 3)) if self.basis is None else np.asarray(self.basis, dtype=float)
        if basis.ndim != 3 or basis.shape[1:] != mean.shape:
            raise ValueError(f"basis shape {basis.shape} does not match mean shape {mean.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "basis", basis)

    @classmethod
    def rigid(cls, points) -> "ShapeModel":
        return cls(np.asarray(points, dtype=float))

    @property
    def M(self) -> int:
        return self.basis.shape[0]

    @property
    def n_points(self) -> int:
        return self.mean.shape[0]

    def points(self, coeffs=None) -> np.ndarray:
        if coeffs is None or self.M == 0:
            return self.mean.copy()
        coeffs = np.asarray(coeffs, dtype=float).reshape(self.M)
        return self.mean + np.tensordot(coeffs, self.basis, axes=1)


def shape_point(model: ShapeModel, coeffs, i: int) -> np.ndarray:
    if not 0 <= i < model.n_points:
        raise IndexError(f"shape point {i} out of range for {model.n_points} points")
    coeffs = np.zeros(model.M) if coeffs is None else np.asarray(coeffs, dtype=float)
    if coeffs.shape != (model.M,):
        raise ValueError(f"expected {model.M} shape coefficients, got {coeffs.shape}")
    return model.mean[i] + coeffs @ model.basis[:, i, :]


def tukey_rho(r, c: float):
    """Tukey biweight loss; saturates at ``c**2 / 6``."""
    r = np.asarray(r, dtype=float)
    u = np.minimum(r / c, 1.0)
    out = (c * c / 6.0) * (1.0 - (1.0 - u * u) ** 3)
    return out if out.ndim else float(out)


def tukey_weight(r, c: float):
    """IRLS weight ``rho'(r) / r``; zero beyond ``c``."""
    r = np.asarray(r, dtype=float)
    u = r / c
    out = np.where(u <= 1.0, (1.0 - u * u) ** 2, 0.0)
    return out if out.ndim else float(out)


def mad_scale(residuals) -> float:
    """Robust scale ``median(|r - median(r)|) / 0.6745`` of the finite residuals."""
    r = np.asarray(residuals, dtype=float).ravel()
    r = r[np.isfinite(r)]
    if r.size == 0:
        raise EmptyInput("no finite residuals")
    med = np.median(r)
    return float(np.median(np.abs(r - med)) / MAD_NORMAL)


def clamp_scale(s: float, lo: float, hi: float) -> float:
    if lo > hi:
        raise ValueError("clamp range must satisfy lo <= hi")
    return max(lo, min(s, hi))


@dataclass(frozen=True)
class MadScale:
    """Per-iteration Tukey constant ``4.685 * clamp(MAD/0.6745, lo, hi)``."""

    lo: float = 0.0
    hi: float = math.inf

    def __call__(self, residuals: np.ndarray) -> float:
        return TUKEY_C * clamp_scale(mad_scale(residuals), self.lo, self.hi)


ScalePolicy = Union[float, Callable[[np.ndarray], float]]


@dataclass(frozen=True)
class RobustConfig:
    tau1: float = 4.0
    tau2: float = 6.0
    tau3: float = 12.0
    max_irls_iters: int = 20
    max_gn_iters: int = 20
    convergence_tol: float = 1e-8

    def __post_init__(self):
        if not 0 < self.tau1 < self.tau2 < self.tau3:
            raise ValueError(
                f"thresholds must satisfy 0 < tau1 < tau2 < tau3, got {self.tau1}, {self.tau2}, {self.tau3}"
            )


class Fit(NamedTuple):
    pose: Pose
    coeffs: np.ndarray
    cost: float
    iterations: int
    # (cost before, cost after) of each accepted step, same scale for both
    steps: list


@dataclass
class RefineResult:
    pose: Pose
    coeffs: np.ndarray
    inlier_ids: frozenset
    final_cost: float
    stage_costs: tuple[float, float, float]
    stage_fits: list = field(default_factory=list, repr=False)


class _Problem:
    """Correspondences joined with the shape-model rows they observe."""

    def __init__(self, corrs: CorrespondenceSet, K: Intrinsics, model: ShapeModel | None):
        self.K = K
        self.image = corrs.image
        self.ids = corrs.ids
        if model is None:
            self.mean = corrs.model
            self.basis = np.zeros((0, len(corrs), 3))
        else:
            if len(corrs) and (corrs.ids.min() < 0 or corrs.ids.max() >= model.n_points):
                raise IndexError("correspondence id outside the shape model")
            self.mean = model.mean[corrs.ids]
            self.basis = model.basis[:, corrs.ids, :]

    @property
    def M(self) -> int:
        return self.basis.shape[0]

    def points(self, coeffs) -> np.ndarray:
        if self.M == 0:
            return self.mean
        return self.mean + np.tensordot(coeffs, self.basis, axes=1)

    def errors(self, pose: Pose, coeffs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Camera points, 2-vector pixel errors and a validity mask."""
        P = self.points(coeffs) @ pose.R.T + pose.t
        valid = P[:, 2] > 1e-12
        z = np.where(valid, P[:, 2], 1.0)
        uv = np.column_stack([self.K.fx * P[:, 0] / z + self.K.cx, self.K.fy * P[:, 1] / z + self.K.cy])
        return P, uv - self.image, valid

    def residuals(self, pose: Pose, coeffs) -> np.ndarray:
        _, e, valid = self.errors(pose, coeffs)
        return np.where(valid, np.hypot(e[:, 0], e[:, 1]), np.inf)

    def jacobian(self, pose: Pose, P: np.ndarray, with_shape: bool, rows=None) -> np.ndarray:
        """d(pixel error)/d(params), shape (N, 2, 6 [+ M]); ``rows`` selects the points in ``P``."""
        fx, fy = self.K.fx, self.K.fy
        x, y, z = P[:, 0], P[:, 1], P[:, 2]
        iz = 1.0 / z
        n = len(P)
        dproj = np.zeros((n, 2, 3))
        dproj[:, 0, 0] = fx * iz
        dproj[:, 0, 2] = -fx * x * iz * iz
        dproj[:, 1, 1] = fy * iz
        dproj[:, 1, 2] = -fy * y * iz * iz
        RX = P - pose.t
        # d(exp(dw) R X)/d(dw) at 0 is -[R X]_x
        dP_dw = np.zeros((n, 3, 3))
        dP_dw[:, 0, 1], dP_dw[:, 0, 2] = RX[:, 2], -RX[:, 1]
        dP_dw[:, 1, 0], dP_dw[:, 1, 2] = -RX[:, 2], RX[:, 0]
        dP_dw[:, 2, 0], dP_dw[:, 2, 1] = RX[:, 1], -RX[:, 0]
        blocks = [dproj @ dP_dw, dproj]
        if with_shape and self.M:
            basis = self.basis if rows is None else self.basis[:, rows]
            dP_dl = np.einsum("ab,mnb->nam", pose.R, basis)
            blocks.append(dproj @ dP_dl)
        return np.concatenate(blocks, axis=2)


def residual_jacobian(
    pose: Pose, coeffs, model: ShapeModel | None, K: Intrinsics, corrs: CorrespondenceSet, with_shape: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Pixel errors (N, 2) and their Jacobian (N, 2, 6 + M)."""
    prob = _Problem(corrs, K, model)
    coeffs = np.zeros(prob.M) if coeffs is None else np.asarray(coeffs, dtype=float)
    P, e, _ = prob.errors(pose, coeffs)
    return e, prob.jacobian(pose, P, with_shape)


def residual(pose: Pose, coeffs, model: ShapeModel | None, K: Intrinsics, corr: Correspondence) -> float:
    """Reprojection error of one correspondence; +inf behind the camera."""
    corrs = CorrespondenceSet.from_list([corr])
    prob = _Problem(corrs, K, model)
    coeffs = np.zeros(prob.M) if coeffs is None else np.asarray(coeffs, dtype=float)
    return float(prob.residuals(pose, coeffs)[0])


def reprojection_residuals(
    pose: Pose, coeffs, model: ShapeModel | None, K: Intrinsics, corrs: CorrespondenceSet
) -> np.ndarray:
    """Vectorized :func:`residual` over a correspondence set."""
    prob = _Problem(corrs, K, model)
    coeffs = np.zeros(prob.M) if coeffs is None else np.asarray(coeffs, dtype=float)
    return prob.residuals(pose, coeffs)


def _apply(pose: Pose, coeffs: np.ndarray, delta: np.ndarray) -> tuple[Pose, np.ndarray]:
    new_coeffs = coeffs + delta[6:] if len(delta) > 6 else coeffs
    return pose.perturbed(delta[:6]), new_coeffs


def _normal_solve(H: np.ndarray, g: np.ndarray, mu: float) -> np.ndarray:
    d = np.diag(H)
    A = H + mu * np.diag(d + 1e-12 * d.max())
    return np.linalg.solve(A, -g)


def _check_rank(H: np.ndarray) -> None:
    d = np.diag(H)
    if not np.all(d > 0):
        raise SingularNormalEquations("a parameter has no support in the weighted residuals")
    s = 1.0 / np.sqrt(d)
    ev = np.linalg.eigvalsh(H * np.outer(s, s))
    if ev[0] < 1e-12 * ev[-1]:
        raise SingularNormalEquations("rank-deficient Jacobian")


def _damped_minimize(
    prob: _Problem,
    pose: Pose,
    coeffs: np.ndarray,
    with_shape: bool,
    scale: ScalePolicy | None,
    max_iters: int,
    tol: float,
) -> Fit:
    """Shared damped Gauss-Newton loop; ``scale=None`` means plain least squares."""
    coeffs = np.array(coeffs, dtype=float)
    mu = 1e-4
    steps = []
    cost = math.nan
    it = 0
    for it in range(1, max_iters + 1):
        P, e, valid = prob.errors(pose, coeffs)
        r = np.where(valid, np.hypot(e[:, 0], e[:, 1]), np.inf)
        if scale is None:
            if not valid.all():
                raise SingularNormalEquations("a point lies behind the camera")
            w = np.ones(len(r))

            def objective(rr):
                return float(np.sum(rr * rr))
        else:
            c = float(scale) if not callable(scale) else float(scale(r))
            if not c > 0:
                raise SingularNormalEquations("Tukey constant is zero")
            w = np.where(valid, tukey_weight(np.where(valid, r, 0.0), c), 0.0)

            def objective(rr, c=c):
                return float(np.sum(tukey_rho(rr, c)))

        if not np.any(w > 0):
            raise SingularNormalEquations("all robust weights are zero")
        cost = objective(r)
        use = w > 0
        J = prob.jacobian(pose, P[use], with_shape, use)
        wu = w[use]
        H = np.einsum("n,nai,naj->ij", wu, J, J)
        g = np.einsum("n,nai,na->i", wu, J, e[use])
        _check_rank(H)

        accepted = False
        delta = np.zeros(len(g))
        while mu < 1e12:
            delta = _normal_solve(H, g, mu)
            cand_pose, cand_coeffs = _apply(pose, coeffs, delta)
            new_cost = objective(prob.residuals(cand_pose, cand_coeffs))
            if new_cost <= cost:
                steps.append((cost, new_cost))
                pose, coeffs, cost = cand_pose, cand_coeffs, new_cost
                mu = max(mu * 0.1, 1e-10)
                accepted = True
                break
            mu *= 10.0
        if not accepted or np.linalg.norm(delta) < tol:
            break
    return Fit(pose, coeffs, cost, it, steps)


def irls_minimize(
    corrs: CorrespondenceSet,
    K: Intrinsics,
    pose: Pose,
    scale: ScalePolicy,
    model: ShapeModel | None = None,
    coeffs=None,
    optimize_shape: bool = False,
    max_iters: int = 20,
    tol: float = 1e-8,
) -> Fit:
    """Tukey M-estimation by iteratively reweighted, damped Gauss-Newton.

    ``scale`` is either a fixed Tukey constant ``c`` or a callable mapping the
    current residuals to ``c`` (see :class:`MadScale`), re-evaluated at every
    iteration.  Points behind the camera get zero weight.
    """
    prob = _Problem(corrs, K, model)
    coeffs = np.zeros(prob.M) if coeffs is None else np.asarray(coeffs, dtype=float)
    with_shape = optimize_shape and prob.M > 0
    n_params = 6 + (prob.M if with_shape else 0)
    if 2 * len(corrs) < n_params:
        raise InsufficientInliers(f"{len(corrs)} correspondences cannot fix {n_params} parameters")
    return _damped_minimize(prob, pose, coeffs, with_shape, scale, max_iters, tol)


def gauss_newton(
    corrs: CorrespondenceSet,
    K: Intrinsics,
    pose: Pose,
    model: ShapeModel | None = None,
    coeffs=None,
    optimize_shape: bool = False,
    max_iters: int = 20,
    tol: float = 1e-8,
) -> Fit:
    """Least-squares reprojection refinement (damped Gauss-Newton)."""
    if len(corrs) < 3:
        raise ValueError(f"Gauss-Newton needs at least 3 correspondences, got {len(corrs)}")
    prob = _Problem(corrs, K, model)
    coeffs = np.zeros(prob.M) if coeffs is None else np.asarray(coeffs, dtype=float)
    if max_iters <= 0:
        return Fit(pose, coeffs, float(np.sum(prob.residuals(pose, coeffs) ** 2)), 0, [])
    with_shape = optimize_shape and prob.M > 0
    if with_shape and 2 * len(corrs) < 6 + prob.M:
        raise InsufficientInliers("too few correspondences for joint pose and shape")
    return _damped_minimize(prob, pose, coeffs, with_shape, None, max_iters, tol)


def min_correspondences(n_shape: int) -> int:
    """Smallest correspondence count that constrains 6 + M parameters."""
    return max(3, math.ceil((6 + n_shape) / 2))


def hre(
    corrs: CorrespondenceSet,
    K: Intrinsics,
    pose_init: Pose,
    model: ShapeModel | None = None,
    cfg: RobustConfig = RobustConfig(),
    optimize_shape: bool = True,
) -> RefineResult:
    """Hierarchical robust estimation.

    1. pose-only IRLS with ``c = 4.685 * clamp(s, tau2, tau3)``, shape at zero;
    2. joint pose/shape IRLS with ``c = 4.685 * clamp(s, tau1, tau2)``;
    3. inliers ``r < tau1`` and a least-squares polish on them.
    """
    prob = _Problem(corrs, K, model)
    M = prob.M if optimize_shape else 0
    coeffs = np.zeros(prob.M)
    common = dict(model=model, max_iters=cfg.max_irls_iters, tol=cfg.convergence_tol)

    fit1 = irls_minimize(corrs, K, pose_init, MadScale(cfg.tau2, cfg.tau3), coeffs=coeffs, **common)
    fit2 = irls_minimize(
        corrs, K, fit1.pose, MadScale(cfg.tau1, cfg.tau2), coeffs=fit1.coeffs, optimize_shape=M > 0, **common
    )
    r = prob.residuals(fit2.pose, fit2.coeffs)
    inliers = r < cfg.tau1
    need = min_correspondences(M)
    if inliers.sum() < need:
        raise InsufficientInliers(f"{int(inliers.sum())} inliers below tau1; need {need}")
    fit3 = gauss_newton(
        corrs.subset(np.flatnonzero(inliers)),
        K,
        fit2.pose,
        model=model,
        coeffs=fit2.coeffs,
        optimize_shape=M > 0,
        max_iters=cfg.max_gn_iters,
        tol=cfg.convergence_tol,
    )
    return RefineResult(
        pose=fit3.pose,
        coeffs=fit3.coeffs,
        inlier_ids=frozenset(int(i) for i in corrs.ids[inliers]),
        final_cost=fit3.cost,
        stage_costs=(fit1.cost, fit2.cost, fit3.cost),
        stage_fits=[fit1, fit2, fit3],
    )
