"""Three-point resection (Grunert's quartic) used as the RANSAC baseline.

The solver is vectorized over a batch of samples so that RANSAC can evaluate
many minimal sets per numpy call; :func:`solve_p3p` is the single-sample view.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateGeometry, NoValidSolution
from .geometry import Intrinsics, Pose


def absolute_orientation(model: np.ndarray, camera: np.ndarray) -> Pose:
    """Least-squares rigid transform with ``camera ~= R @ model + t`` (Kabsch)."""
    R, t = _kabsch(np.asarray(model, dtype=float)[None], np.asarray(camera, dtype=float)[None])
    return Pose(R[0], t[0])


def _kabsch(model: np.ndarray, camera: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched Kabsch over (B, n, 3) point sets."""
    mc = model.mean(axis=1, keepdims=True)
    cc = camera.mean(axis=1, keepdims=True)
    H = np.swapaxes(model - mc, 1, 2) @ (camera - cc)
    U, _, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, 1, 2)
    Ut = np.swapaxes(U, 1, 2)
    d = np.sign(np.linalg.det(V @ Ut))
    d[d == 0] = 1.0
    V[:, :, 2] *= d[:, None]
    R = V @ Ut
    t = cc[:, 0] - (R @ mc[:, 0, :, None])[..., 0]
    return R, t


_PAIRS = ((1, 2), (0, 2), (0, 1))


def _polish_distances(s: np.ndarray, cosines: np.ndarray, sq_dist: np.ndarray, iters: int = 4) -> np.ndarray:
    """Newton iterations on the three law-of-cosines constraints, batched (B, 3)."""
    s = s.copy()
    B = len(s)
    rows = np.arange(B)
    for _ in range(iters):
        F = np.empty((B, 3))
        J = np.zeros((B, 3, 3))
        for k, (i, j) in enumerate(_PAIRS):
            F[:, k] = s[:, i] ** 2 + s[:, j] ** 2 - 2.0 * s[:, i] * s[:, j] * cosines[:, k] - sq_dist[:, k]
            J[rows, k, i] = 2.0 * s[:, i] - 2.0 * s[:, j] * cosines[:, k]
            J[rows, k, j] = 2.0 * s[:, j] - 2.0 * s[:, i] * cosines[:, k]
        ok = np.abs(np.linalg.det(J)) > 1e-300
        if not ok.any():
            break
        step = np.zeros_like(s)
        step[ok] = np.linalg.solve(J[ok], F[ok][..., None])[..., 0]
        s -= step
        if np.abs(step).max() < 1e-15 * max(1.0, np.abs(s).max()):
            break
    return s


def solve_p3p_batch(image: np.ndarray, model: np.ndarray, K: Intrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Real P3P poses for a batch of samples.

    Parameters
    ----------
    image : (B, 3, 2) pixels.
    model : (B, 3, 3) model points.

    Returns ``(R, t, owner)`` with ``R`` (H, 3, 3), ``t`` (H, 3) and ``owner``
    (H,) the sample index of each pose.  Collinear samples yield no poses.
    """
    image = np.asarray(image, dtype=float).reshape(-1, 3, 2)
    X = np.asarray(model, dtype=float).reshape(-1, 3, 3)
    B = len(X)
    empty = (np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    if B == 0:
        return empty

    area = np.linalg.norm(np.cross(X[:, 1] - X[:, 0], X[:, 2] - X[:, 0]), axis=1)
    scale = np.maximum(
        np.maximum(np.linalg.norm(X[:, 1] - X[:, 0], axis=1), np.linalg.norm(X[:, 2] - X[:, 0], axis=1)), 1e-300
    )
    good = area >= 1e-9 * scale * scale

    f = K.normalize(image)
    f /= np.linalg.norm(f, axis=2, keepdims=True)

    a2 = np.sum((X[:, 1] - X[:, 2]) ** 2, axis=1)
    b2 = np.sum((X[:, 0] - X[:, 2]) ** 2, axis=1)
    c2 = np.sum((X[:, 0] - X[:, 1]) ** 2, axis=1)
    b2 = np.where(good, b2, 1.0)
    cos_a = np.sum(f[:, 1] * f[:, 2], axis=1)
    cos_b = np.sum(f[:, 0] * f[:, 2], axis=1)
    cos_g = np.sum(f[:, 0] * f[:, 1], axis=1)

    # Grunert: s2 = u*s1, s3 = v*s1, quartic in v
    p = (a2 - c2) / b2
    q = (a2 + c2) / b2
    A4 = (p - 1.0) ** 2 - 4.0 * c2 / b2 * cos_a**2
    A3 = 4.0 * (p * (1.0 - p) * cos_b - (1.0 - q) * cos_a * cos_g + 2.0 * c2 / b2 * cos_a**2 * cos_b)
    A2 = 2.0 * (
        p**2
        - 1.0
        + 2.0 * p**2 * cos_b**2
        + 2.0 * (b2 - c2) / b2 * cos_a**2
        - 4.0 * q * cos_a * cos_b * cos_g
        + 2.0 * (b2 - a2) / b2 * cos_g**2
    )
    A1 = 4.0 * (-p * (1.0 + p) * cos_b + 2.0 * a2 / b2 * cos_g**2 * cos_b - (1.0 - q) * cos_a * cos_g)
    A0 = (1.0 + p) ** 2 - 4.0 * a2 / b2 * cos_g**2
    coeffs = np.column_stack([A4, A3, A2, A1, A0])

    roots = np.full((B, 4), np.nan, dtype=complex)
    quartic = good & (np.abs(A4) > 1e-14 * np.abs(coeffs).max(axis=1))
    if quartic.any():
        C = np.zeros((int(quartic.sum()), 4, 4))
        C[:, 0, :] = -coeffs[quartic, 1:] / coeffs[quartic, :1]
        C[:, 1, 0] = C[:, 2, 1] = C[:, 3, 2] = 1.0
        roots[quartic] = np.linalg.eigvals(C)
    for b in np.flatnonzero(good & ~quartic):
        # leading coefficient vanished; fall back to the lower-degree polynomial
        lead = np.flatnonzero(np.abs(coeffs[b]) > 1e-14 * np.abs(coeffs[b]).max())
        if lead.size:
            r = np.roots(coeffs[b, lead[0]:])
            roots[b, : len(r)] = r

    owner, col = np.nonzero(np.isfinite(roots.real) & (np.abs(roots.imag) <= 1e-6 * np.maximum(1.0, np.abs(roots.real))))
    v = roots[owner, col].real
    ca, cb, cg = cos_a[owner], cos_b[owner], cos_g[owner]
    pp = p[owner]
    den = 2.0 * (cg - v * ca)
    den_ok = np.abs(den) >= 1e-12
    u = ((pp - 1.0) * v * v - 2.0 * pp * cb * v + 1.0 + pp) / np.where(den_ok, den, 1.0)
    s1_sq = b2[owner] / (1.0 + v * v - 2.0 * v * cb)
    keep = den_ok & (s1_sq > 0) & (u > 0) & (v > 0)
    if not keep.any():
        return empty
    owner, u, v = owner[keep], u[keep], v[keep]
    s1 = np.sqrt(s1_sq[keep])
    s = np.column_stack([s1, u * s1, v * s1])
    cosines = np.column_stack([cos_a[owner], cos_b[owner], cos_g[owner]])
    sq_dist = np.column_stack([a2[owner], b2[owner], c2[owner]])
    s = _polish_distances(s, cosines, sq_dist)
    pos = np.all(s > 0, axis=1)
    owner, s = owner[pos], s[pos]
    if len(owner) == 0:
        return empty
    R, t = _kabsch(X[owner], f[owner] * s[:, :, None])
    return R, t, owner


def solve_p3p(image: np.ndarray, model: np.ndarray, K: Intrinsics) -> list[Pose]:
    """All real poses mapping three model points onto their pixels.

    Parameters
    ----------
    image : (3, 2) pixel coordinates.
    model : (3, 3) model points.
    """
    X = np.asarray(model, dtype=float).reshape(3, 3)
    area = np.linalg.norm(np.cross(X[1] - X[0], X[2] - X[0]))
    scale = max(np.linalg.norm(X[1] - X[0]), np.linalg.norm(X[2] - X[0]), 1e-300)
    if area < 1e-9 * scale * scale:
        raise DegenerateGeometry("model points are collinear")
    R, t, _ = solve_p3p_batch(np.asarray(image, dtype=float)[None], X[None], K)
    poses: list[Pose] = []
    for Ri, ti in zip(R, t):
        pose = Pose(Ri, ti)
        if any(np.allclose(pose.matrix, other.matrix, atol=1e-9) for other in poses):
            continue
        poses.append(pose)
    if not poses:
        raise NoValidSolution("no real P3P solution")
    return poses
