"""Closed-form one-point pose solver for objects standing on the ground.

Given a single 2D-3D keypoint correspondence, the object's 2D bounding box,
the footprint of its 3D bounding box, the intrinsics and the camera pitch,
the object pose has one unknown degree of freedom.  The solver aligns the
footprint with the back-projected rays of the two vertical bounding-box edges
in the bird's-eye view and solves the resulting sine-rule equation for the
local yaw and the keypoint distance.

Footprint corners are numbered 1-4 as front-left, front-right, rear-right and
rear-left with respect to the object's forward direction (see
:mod:`groundpose.geometry` for the angle convention).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import DegenerateGeometry, DegenerateRay, NoValidSolution
from .geometry import (
    CAMERA_FORWARD_BEV,
    GroundFrame,
    Intrinsics,
    Pose,
    bev_cross,
    ground_ray,
    project_points,
    rotation_y,
    signed_bev_angle,
    wrap_angle,
)

HALF_PI = 0.5 * math.pi
ANGLE_TOL = 1e-9
_SIN_EPS = 1e-9
_LEN_EPS = 1e-12


@dataclass(frozen=True)
class BoundingBox2D:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(
                f"invalid 2D box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max}):"
                " need x_min < x_max and y_min < y_max"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class BoundingBox3D:
    """Ground footprint of a 3D box in model (X, Z) coordinates.

    ``corners`` is a (4, 2) array ordered front-left, front-right, rear-right,
    rear-left; ``forward`` is the unit forward direction in the same plane.
    ``heights`` optionally gives the box's model-Y extent ``(y_min, y_max)``;
    when known it lets the solver tell apart poses that fit the side edges
    equally well but imply different distances.
    """

    corners: np.ndarray
    forward: np.ndarray
    heights: tuple[float, float] | None = None

    def __post_init__(self):
        corners = np.asarray(self.corners, dtype=float).reshape(4, 2)
        forward = np.asarray(self.forward, dtype=float).reshape(2)
        if abs(np.hypot(*forward) - 1.0) > 1e-9:
            raise ValueError("forward direction must have unit length")
        turns = [
            bev_cross(corners[(i + 1) % 4] - corners[i], corners[(i + 2) % 4] - corners[(i + 1) % 4])
            for i in range(4)
        ]
        if not (all(t > _LEN_EPS for t in turns) or all(t < -_LEN_EPS for t in turns)):
            raise ValueError("footprint corners must form a non-degenerate convex quadrilateral")
        if self.heights is not None:
            y_lo, y_hi = (float(h) for h in self.heights)
            if not y_lo <= y_hi:
                raise ValueError("heights must be ordered (y_min, y_max)")
            object.__setattr__(self, "heights", (y_lo, y_hi))
        object.__setattr__(self, "corners", corners)
        object.__setattr__(self, "forward", forward)

    @classmethod
    def from_extents(
        cls,
        x_min: float,
        x_max: float,
        z_min: float,
        z_max: float,
        heights: tuple[float, float] | None = None,
    ) -> "BoundingBox3D":
        """Axis-aligned footprint with forward = model +Z."""
        corners = [[x_min, z_max], [x_max, z_max], [x_max, z_min], [x_min, z_min]]
        return cls(np.array(corners), np.array([0.0, 1.0]), heights)

    def box_corners(self) -> np.ndarray:
        """The 8 model-frame corners of the 3D box (requires ``heights``)."""
        if self.heights is None:
            raise ValueError("box heights are unknown")
        return np.array([[x, y, z] for x, z in self.corners for y in self.heights])

    def corner(self, k: int) -> np.ndarray:
        """Corner by its 1-based number."""
        return self.corners[k - 1]


class CaseId(enum.IntEnum):
    """Which footprint corners touch the left/right bounding-box edges.

    CASE1-CASE4 are the far-field configurations (diagonal corner pairs).
    The NEAR_* cases cover the perspective configurations where the two
    extreme corners share a face of the footprint, e.g. the rear face of an
    object seen almost straight from behind at short range.
    """

    CASE1 = 1
    CASE2 = 2
    CASE3 = 3
    CASE4 = 4
    NEAR_REAR = 5
    NEAR_RIGHT = 6
    NEAR_FRONT = 7
    NEAR_LEFT = 8


@dataclass(frozen=True)
class _CaseRule:
    left: int
    right: int
    yaw: tuple[float, float]
    psi_left: tuple[float, float]
    psi_right: tuple[float, float]


PI = math.pi
CASE_RULES: dict[CaseId, _CaseRule] = {
    CaseId.CASE1: _CaseRule(4, 2, (0.0, HALF_PI), (-PI, -HALF_PI), (0.0, HALF_PI)),
    CaseId.CASE2: _CaseRule(3, 1, (HALF_PI, PI), (HALF_PI, PI), (-HALF_PI, 0.0)),
    CaseId.CASE3: _CaseRule(1, 3, (-HALF_PI, 0.0), (-HALF_PI, 0.0), (HALF_PI, PI)),
    CaseId.CASE4: _CaseRule(2, 4, (-PI, -HALF_PI), (0.0, HALF_PI), (-PI, -HALF_PI)),
    CaseId.NEAR_REAR: _CaseRule(4, 3, (-HALF_PI, HALF_PI), (-PI, -HALF_PI), (HALF_PI, PI)),
    CaseId.NEAR_RIGHT: _CaseRule(3, 2, (0.0, PI), (HALF_PI, PI), (0.0, HALF_PI)),
    CaseId.NEAR_FRONT: _CaseRule(2, 1, (HALF_PI, 3 * HALF_PI), (0.0, HALF_PI), (-HALF_PI, 0.0)),
    CaseId.NEAR_LEFT: _CaseRule(1, 4, (-PI, 0.0), (-HALF_PI, 0.0), (-PI, -HALF_PI)),
}

FAR_FIELD_CASES = (CaseId.CASE1, CaseId.CASE2, CaseId.CASE3, CaseId.CASE4)
ALL_CASES = tuple(CaseId)

# left-side corners (front-left, rear-left) have negative angles from forward
_CORNER_SIGN = {1: -1.0, 2: 1.0, 3: 1.0, 4: -1.0}


def in_range(angle: float, bounds: tuple[float, float], tol: float = ANGLE_TOL) -> bool:
    """Inclusive membership of an angle in an arc, modulo 2*pi."""
    lo, hi = bounds
    mid = 0.5 * (lo + hi)
    return abs(wrap_angle(angle - mid)) <= 0.5 * (hi - lo) + tol


@dataclass(frozen=True)
class P1PParams:
    phi_y: float
    theta_L: float
    theta_R: float
    psi_L: float
    psi_R: float
    l_L: float
    l_R: float
    case: CaseId


@dataclass(frozen=True)
class P1PSolution:
    yaw: float
    depth: float
    pose: Pose
    case: CaseId
    params: P1PParams
    edge_residual: float


def edge_rays(bbox: BoundingBox2D, K: Intrinsics, g: GroundFrame) -> tuple[np.ndarray, np.ndarray]:
    """BEV directions of the left and right box edges (seeded at the edge midpoints)."""
    v_mid = 0.5 * (bbox.y_min + bbox.y_max)
    d_left = ground_ray((bbox.x_min, v_mid), K, g)
    d_right = ground_ray((bbox.x_max, v_mid), K, g)
    return d_left[[0, 2]], d_right[[0, 2]]


def case_params(case: CaseId, keypoint_bev, box3d: BoundingBox3D) -> tuple[float, float, float, float]:
    """Corner angles and distances ``(psi_L, psi_R, l_L, l_R)`` seen from the keypoint."""
    rule = CASE_RULES[CaseId(case)]
    p_k = np.asarray(keypoint_bev, dtype=float).reshape(2)
    out = []
    for k in (rule.left, rule.right):
        d = box3d.corner(k) - p_k
        length = math.hypot(d[0], d[1])
        if length < _LEN_EPS:
            raise DegenerateGeometry(f"keypoint coincides with footprint corner {k}")
        c = float(np.clip(box3d.forward @ d / length, -1.0, 1.0))
        out.append((_CORNER_SIGN[k] * math.acos(c), length))
    (psi_l, l_l), (psi_r, l_r) = out
    return psi_l, psi_r, l_l, l_r


def _check_sines(params: P1PParams) -> tuple[float, float]:
    s_l, s_r = math.sin(params.theta_L), math.sin(params.theta_R)
    if s_l < _SIN_EPS or s_r < _SIN_EPS:
        raise DegenerateGeometry("keypoint ray coincides with a bounding-box edge ray")
    return s_l, s_r


def solve_yaw(params: P1PParams) -> float:
    """Local yaw from the sine-rule equation.

    The equation fixes the yaw only up to a half turn; of the two roots the
    one giving a positive keypoint distance is returned.
    """
    s_l, s_r = _check_sines(params)
    a = params.l_R / s_r
    b = params.l_L / s_l
    w_r = params.psi_R - params.theta_R
    w_l = params.psi_L + params.theta_L
    num = -a * math.sin(w_r) - b * math.sin(w_l)
    den = a * math.cos(w_r) + b * math.cos(w_l)
    # depth at the atan2 root is a*b*sin(w_r - w_l)/hypot(num, den)
    branch = math.sin(w_r - w_l)
    if abs(branch) < 1e-12 or math.hypot(num, den) < _LEN_EPS:
        raise DegenerateGeometry("corner rays are parallel; depth is undetermined")
    if branch < 0:
        num, den = -num, -den
    return math.atan2(num, den)


def solve_depth(params: P1PParams, yaw: float) -> float:
    """Keypoint distance from the right-edge sine rule."""
    _, s_r = _check_sines(params)
    phi_r = yaw + params.psi_R - params.theta_R
    depth = params.l_R * math.sin(phi_r) / s_r
    if not depth > 0:
        raise NoValidSolution(f"non-positive keypoint distance {depth:.3g}")
    return depth


def depth_left(params: P1PParams, yaw: float) -> float:
    """Keypoint distance from the left-edge sine rule (consistency check)."""
    s_l, _ = _check_sines(params)
    phi_l = -yaw - params.psi_L - params.theta_L
    return params.l_L * math.sin(phi_l) / s_l


def assemble_pose(
    yaw: float,
    depth: float,
    phi_y: float,
    keypoint2d,
    keypoint3d,
    K: Intrinsics,
    g: GroundFrame,
) -> Pose:
    """Camera-from-object pose placing the keypoint at ``depth`` along its ray."""
    if not depth > 0:
        raise NoValidSolution("depth must be positive")
    d_x = ground_ray(keypoint2d, K, g)
    R_go = rotation_y(phi_y + yaw)
    X = np.asarray(keypoint3d, dtype=float).reshape(3)
    t_g = depth * d_x - R_go @ X
    return Pose(g.r_cg @ R_go, g.r_cg @ t_g)


def keypoint_params(
    keypoint2d, keypoint3d, case: CaseId, box3d: BoundingBox3D, rays, K: Intrinsics, g: GroundFrame
) -> P1PParams:
    v_l, v_r = rays
    v_k = ground_ray(keypoint2d, K, g)[[0, 2]]
    psi_l, psi_r, l_l, l_r = case_params(case, np.asarray(keypoint3d)[[0, 2]], box3d)
    return P1PParams(
        phi_y=signed_bev_angle(CAMERA_FORWARD_BEV, v_k),
        theta_L=signed_bev_angle(v_l, v_k),
        theta_R=signed_bev_angle(v_k, v_r),
        psi_L=psi_l,
        psi_R=psi_r,
        l_L=l_l,
        l_R=l_r,
        case=CaseId(case),
    )


def edge_residual(pose: Pose, keypoint3d, box3d: BoundingBox3D, bbox: BoundingBox2D, K: Intrinsics) -> float:
    """Pixel misalignment between the projected 3D box and the 2D box.

    Sums ``|u_leftmost - x_min| + |u_rightmost - x_max|``, plus the same for
    the top and bottom edges when the box heights are known.  Without heights
    the footprint is lifted to the keypoint's model height.
    """
    if box3d.heights is None:
        y = float(np.asarray(keypoint3d)[1])
        pts = np.column_stack([box3d.corners[:, 0], np.full(4, y), box3d.corners[:, 1]])
    else:
        pts = box3d.box_corners()
    uv, valid = project_points(pose, K, pts)
    if not valid.all():
        return math.inf
    u, v = uv[:, 0], uv[:, 1]
    err = abs(u.min() - bbox.x_min) + abs(u.max() - bbox.x_max)
    if box3d.heights is not None:
        err += abs(v.min() - bbox.y_min) + abs(v.max() - bbox.y_max)
    return err


def solve_case(
    case: CaseId,
    keypoint2d,
    keypoint3d,
    bbox: BoundingBox2D,
    box3d: BoundingBox3D,
    K: Intrinsics,
    g: GroundFrame,
    rays=None,
) -> P1PSolution:
    """Solve under one case hypothesis and enforce that case's angle ranges."""
    rays = edge_rays(bbox, K, g) if rays is None else rays
    params = keypoint_params(keypoint2d, keypoint3d, case, box3d, rays, K, g)
    if params.theta_L <= 0 or params.theta_R <= 0:
        raise NoValidSolution("keypoint ray is outside the bounding-box wedge")
    rule = CASE_RULES[params.case]
    if not (in_range(params.psi_L, rule.psi_left) and in_range(params.psi_R, rule.psi_right)):
        raise NoValidSolution(f"{params.case.name}: corner angles outside the case range")
    yaw = solve_yaw(params)
    if not in_range(yaw, rule.yaw):
        raise NoValidSolution(f"{params.case.name}: yaw {yaw:.4f} outside the case range")
    depth = solve_depth(params, yaw)
    pose = assemble_pose(yaw, depth, params.phi_y, keypoint2d, keypoint3d, K, g)
    return P1PSolution(
        yaw=yaw,
        depth=depth,
        pose=pose,
        case=params.case,
        params=params,
        edge_residual=edge_residual(pose, keypoint3d, box3d, bbox, K),
    )


def candidate_solutions(
    keypoint2d,
    keypoint3d,
    bbox: BoundingBox2D,
    box3d: BoundingBox3D,
    K: Intrinsics,
    g: GroundFrame,
    cases: Iterable[CaseId] = ALL_CASES,
) -> list[P1PSolution]:
    """All case hypotheses that pass the range and depth filters."""
    rays = edge_rays(bbox, K, g)
    out = []
    for case in cases:
        try:
            out.append(solve_case(case, keypoint2d, keypoint3d, bbox, box3d, K, g, rays))
        except (NoValidSolution, DegenerateGeometry, DegenerateRay):
            continue
    return out


def solve(
    keypoint2d,
    keypoint3d,
    bbox: BoundingBox2D,
    box3d: BoundingBox3D,
    K: Intrinsics,
    g: GroundFrame,
    cases: Iterable[CaseId] = ALL_CASES,
) -> P1PSolution:
    """Unique pose from one correspondence.

    Surviving case hypotheses are ranked by how well the projected footprint
    spans the bounding box; the best one is returned.  Pass
    ``cases=FAR_FIELD_CASES`` to restrict the solver to the four diagonal
    configurations.
    """
    found = candidate_solutions(keypoint2d, keypoint3d, bbox, box3d, K, g, cases)
    if not found:
        raise NoValidSolution("no case hypothesis survived filtering")
    return min(found, key=lambda s: (s.edge_residual, int(s.case)))
