"""Forward-synthesis scenes and independent oracles shared by the tests."""

from __future__ import annotations

import math
from types import SimpleNamespace

import numpy as np

from groundpose.geometry import GroundFrame, Intrinsics, Pose, project_points
from groundpose.p1p import BoundingBox2D, BoundingBox3D

K = Intrinsics(800.0, 800.0, 320.0, 240.0)


def ry(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rx(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def forward_scene(
    local_yaw: float,
    rng: np.random.Generator,
    pitch: float = 0.0,
    n: int = 30,
    keypoint_cam=None,
    half=(1.0, 0.8, 2.2),
) -> SimpleNamespace:
    """Box-shaped object whose keypoint 0 sees the object at ``local_yaw``.

    The pose is built directly from the definition: keypoint BEV bearing
    ``phi`` from the camera, global yaw ``phi + local_yaw``.
    """
    hx, hy, hz = half
    pts = rng.uniform(-1.0, 1.0, (n, 3)) * [hx, hy, hz]
    pts[0] = rng.uniform(-0.6, 0.6, 3) * [hx, hy, hz]
    box3d = BoundingBox3D.from_extents(
        pts[:, 0].min(), pts[:, 0].max(), pts[:, 2].min(), pts[:, 2].max(), (pts[:, 1].min(), pts[:, 1].max())
    )
    r_cg = rx(-pitch)
    if keypoint_cam is None:
        kg = np.array([rng.uniform(-4, 4), rng.uniform(-0.5, 0.5), rng.uniform(15, 35)])
    else:
        kg = np.asarray(keypoint_cam, dtype=float)
    phi = math.atan2(kg[0], kg[2])
    R_go = ry(phi + local_yaw)
    t_g = kg - R_go @ pts[0]
    pose = Pose(r_cg @ R_go, r_cg @ t_g)
    uv, valid = project_points(pose, K, pts)
    assert valid.all()
    cuv, cvalid = project_points(pose, K, box3d.box_corners())
    assert cvalid.all()
    bbox = BoundingBox2D(cuv[:, 0].min(), cuv[:, 1].min(), cuv[:, 0].max(), cuv[:, 1].max())
    return SimpleNamespace(
        pose=pose,
        points=pts,
        uv=uv,
        box3d=box3d,
        bbox=bbox,
        ground=GroundFrame(pitch),
        K=K,
        local_yaw=local_yaw,
        depth=math.hypot(kg[0], kg[2]),
    )


def wrap(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def brute_force_yaw(x, X, bbox: BoundingBox2D, box3d: BoundingBox3D, K: Intrinsics, pitch: float, step: float = 1e-5):
    """Grid search over local yaw minimizing the 2D-box edge misalignment.

    For each candidate yaw the keypoint is placed on its pixel ray at the
    distance where the footprint touches the left box edge ray (found by
    line intersection, not by the sine rule), the 3D box is projected and
    the four edge offsets are summed.  Returns ``(best_yaw, best_residual)``.
    """
    Kinv = np.linalg.inv(K.matrix)
    r_cg = rx(-pitch)

    def bev(u, v):
        d = r_cg.T @ Kinv @ np.array([u, v, 1.0])
        return d / math.hypot(d[0], d[2])

    d_k = bev(*x)
    vk = d_k[[0, 2]]
    vmid = 0.5 * (bbox.y_min + bbox.y_max)
    vl = bev(bbox.x_min, vmid)[[0, 2]]
    phi = math.atan2(vk[0], vk[1])

    def cr(a, b):
        return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]

    side_l = math.copysign(1.0, cr(vl, vk))
    corners = box3d.box_corners()
    foot = box3d.corners - np.asarray(X)[[0, 2]]
    thetas = np.arange(-math.pi, math.pi, step)
    best = (math.inf, math.nan)
    for chunk in np.array_split(thetas, max(1, len(thetas) // 50000)):
        a = phi + chunk
        c, s = np.cos(a), np.sin(a)
        # footprint offsets from the keypoint, rotated into the ground frame
        qx = c[:, None] * foot[:, 0] + s[:, None] * foot[:, 1]
        qz = -s[:, None] * foot[:, 0] + c[:, None] * foot[:, 1]
        q = np.stack([qx, qz], axis=-1)
        # every corner on the keypoint's side of the left edge ray; the
        # binding corner fixes the distance
        l = np.max(-side_l * cr(vl, q) / abs(cr(vl, vk)), axis=1)
        R = np.zeros((len(a), 3, 3))
        R[:, 0, 0], R[:, 0, 2], R[:, 1, 1], R[:, 2, 0], R[:, 2, 2] = c, s, 1.0, -s, c
        t_g = l[:, None] * d_k - R @ np.asarray(X)
        P = (r_cg @ R) @ corners.T + (t_g @ r_cg.T)[:, :, None]
        P = np.swapaxes(P, 1, 2)
        z = P[..., 2]
        ok = np.all(z > 1e-9, axis=1) & (l > 0)
        z = np.where(z > 1e-9, z, 1.0)
        u = K.fx * P[..., 0] / z + K.cx
        v = K.fy * P[..., 1] / z + K.cy
        res = (
            np.abs(u.min(1) - bbox.x_min)
            + np.abs(u.max(1) - bbox.x_max)
            + np.abs(v.min(1) - bbox.y_min)
            + np.abs(v.max(1) - bbox.y_max)
        )
        res = np.where(ok, res, np.inf)
        i = int(np.argmin(res))
        if res[i] < best[0]:
            best = (float(res[i]), float(chunk[i]))
    return best[1], best[0]


def central_difference(f, x0: np.ndarray, h: float = 1e-6) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    f0 = np.asarray(f(x0))
    J = np.zeros(f0.shape + (len(x0),))
    for k in range(len(x0)):
        e = np.zeros_like(x0)
        e[k] = h
        J[..., k] = (np.asarray(f(x0 + e)) - np.asarray(f(x0 - e))) / (2 * h)
    return J
