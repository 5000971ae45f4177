"""Rigid-body and projective primitives.

Frames follow the usual pinhole convention: camera +X right, +Y down, +Z
forward.  The ground frame shares the camera center and differs from the
camera frame by the pitch rotation ``R_cg = exp([-pitch, 0, 0])``, which maps
ground coordinates to camera coordinates.

Bird's-eye-view (BEV) vectors are the (X, Z) components of ground-frame
vectors.  Signed BEV angles are measured about the ground +Y axis with the
right-hand rule, so a positive angle turns +Z (forward) toward +X (right).
With this convention a rotation ``exp([0, a, 0])`` turns every BEV direction
by exactly ``+a``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRay, NonPositiveDepth

_DEPTH_EPS = 1e-12
_RAY_EPS = 1e-12

CAMERA_FORWARD_BEV = np.array([0.0, 1.0])


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix with ``hat(w) @ v == cross(w, v)``."""
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(omega) -> np.ndarray:
    """Rodrigues exponential of a rotation vector."""
    w = np.asarray(omega, dtype=float).reshape(3)
    theta = math.sqrt(float(w @ w))
    W = hat(w)
    if theta < 1e-8:
        # second-order Taylor; the truncation error is O(theta^3)
        return np.eye(3) + W + 0.5 * (W @ W)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * W + b * (W @ W)


def log_so3(R: np.ndarray) -> np.ndarray:
    """Rotation vector of ``R`` (inverse of :func:`exp_so3` for angles < pi)."""
    c = float(np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0))
    theta = math.acos(c)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * v
    if math.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; use the symmetric part
        M = 0.5 * (R + np.eye(3))
        axis = M[:, int(np.argmax(np.diag(M)))]
        axis = axis / np.linalg.norm(axis)
        if axis @ v < 0:
            axis = -axis
        return theta * axis
    return v * (theta / (2.0 * math.sin(theta)))


def rotation_y(angle: float) -> np.ndarray:
    """Rotation about +Y; equals ``exp_so3([0, angle, 0])``."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def is_rotation(R: np.ndarray, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        return False
    return bool(
        np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) <= tol
    )


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    w = math.remainder(a, 2.0 * math.pi)
    if w <= -math.pi:
        w += 2.0 * math.pi
    return w


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    def normalize(self, x) -> np.ndarray:
        """Pixel(s) to normalized homogeneous camera rays ``K^-1 [u, v, 1]``."""
        x = np.asarray(x, dtype=float)
        u = (x[..., 0] - self.cx) / self.fx
        v = (x[..., 1] - self.cy) / self.fy
        return np.stack([u, v, np.ones_like(u)], axis=-1)


@dataclass(frozen=True)
class GroundFrame:
    """Camera tilt relative to the ground plane (radians)."""

    pitch: float = 0.0
    r_cg: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not -math.pi / 2 < self.pitch < math.pi / 2:
            raise ValueError(f"pitch must lie in (-pi/2, pi/2), got {self.pitch}")
        object.__setattr__(self, "r_cg", exp_so3([-self.pitch, 0.0, 0.0]))

    @classmethod
    def from_degrees(cls, pitch_deg: float) -> "GroundFrame":
        return cls(math.radians(pitch_deg))


@dataclass(frozen=True)
class Pose:
    """Rigid transform mapping object coordinates to camera coordinates."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=float).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @property
    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def apply(self, X) -> np.ndarray:
        """Transform point(s) of shape (3,) or (N, 3)."""
        X = np.asarray(X, dtype=float)
        return X @ self.R.T + self.t

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def perturbed(self, delta) -> "Pose":
        """Left-multiplied update: ``R <- exp(dw) R``, ``t <- t + dt`` for ``delta = [dw, dt]``."""
        delta = np.asarray(delta, dtype=float)
        return Pose(exp_so3(delta[:3]) @ self.R, self.t + delta[3:6])


def project(pose: Pose, K: Intrinsics, X) -> np.ndarray:
    """Pinhole projection of a single model point."""
    p = pose.apply(X)
    if p[2] <= _DEPTH_EPS:
        raise NonPositiveDepth(f"point has camera depth {p[2]:.3g}")
    return np.array([K.fx * p[0] / p[2] + K.cx, K.fy * p[1] / p[2] + K.cy])


def project_points(pose: Pose, K: Intrinsics, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection.

    Returns ``(uv, valid)``; rows with non-positive depth are NaN in ``uv`` and
    False in ``valid``.
    """
    P = pose.apply(np.asarray(X, dtype=float).reshape(-1, 3))
    z = P[:, 2]
    valid = z > _DEPTH_EPS
    zs = np.where(valid, z, np.nan)
    uv = np.stack([K.fx * P[:, 0] / zs + K.cx, K.fy * P[:, 1] / zs + K.cy], axis=1)
    return uv, valid


def unproject(x, depth: float, K: Intrinsics) -> np.ndarray:
    """Camera-frame point at the given Z depth along the ray of pixel ``x``."""
    return K.normalize(x) * depth


def ground_ray(x, K: Intrinsics, g: GroundFrame) -> np.ndarray:
    """Ground-frame ray of a pixel, scaled so its (X, Z) part has unit length."""
    d = g.r_cg.T @ K.normalize(x)
    n = math.hypot(d[0], d[2])
    if n < _RAY_EPS:
        raise DegenerateRay("pixel ray is parallel to the ground normal")
    return d / n


def to_bev(v, g: GroundFrame) -> np.ndarray:
    """Unit (X, Z) direction of a camera-frame vector expressed in the ground frame."""
    V = g.r_cg.T @ np.asarray(v, dtype=float)
    n = math.hypot(V[0], V[2])
    if n < _RAY_EPS:
        raise DegenerateRay("vector has no ground-plane component")
    return np.array([V[0] / n, V[2] / n])


def bev_cross(a, b) -> float:
    """+Y component of the 3D cross product of BEV vectors ``a`` and ``b``."""
    return float(a[1] * b[0] - a[0] * b[1])


def signed_bev_angle(a, b) -> float:
    """Signed angle rotating BEV direction ``a`` onto ``b``, in (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if math.hypot(a[0], a[1]) < _RAY_EPS or math.hypot(b[0], b[1]) < _RAY_EPS:
        raise DegenerateRay("zero-length BEV vector")
    ang = math.atan2(bev_cross(a, b), float(a @ b))
    return math.pi if ang == -math.pi else ang


def bev_direction(angle: float) -> np.ndarray:
    """Unit BEV vector at ``angle`` from camera forward."""
    return np.array([math.sin(angle), math.cos(angle)])
