"""n-point RANSAC with adaptive termination.

The engine is solver-agnostic: a minimal solver is any callable taking the
sampled pixels, model points and the scene, returning candidate poses, with a
``sample_size`` attribute.  :class:`P1PSolver` (one point plus the 2D box and
ground prior) and :class:`P3PSolver` (classical three-point resection) are
provided.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Protocol, Sequence

import numpy as np

from . import p1p
from .errors import NoValidSolution, PoseError
from .geometry import GroundFrame, Intrinsics, Pose, project_points
from .p1p import BoundingBox2D, BoundingBox3D
from .p3p import solve_p3p, solve_p3p_batch


@dataclass(frozen=True)
class Correspondence:
    image: np.ndarray
    model: np.ndarray
    id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "image", np.asarray(self.image, dtype=float).reshape(2))
        object.__setattr__(self, "model", np.asarray(self.model, dtype=float).reshape(3))
        object.__setattr__(self, "id", int(self.id))


@dataclass(frozen=True)
class CorrespondenceSet:
    """Row-aligned arrays of pixels (N, 2), model points (N, 3) and integer ids."""

    image: np.ndarray
    model: np.ndarray
    ids: np.ndarray = None

    def __post_init__(self):
        image = np.asarray(self.image, dtype=float).reshape(-1, 2)
        model = np.asarray(self.model, dtype=float).reshape(-1, 3)
        if len(image) != len(model):
            raise ValueError(f"{len(image)} pixels but {len(model)} model points")
        ids = np.arange(len(image)) if self.ids is None else np.asarray(self.ids, dtype=np.int64).reshape(-1)
        if len(ids) != len(image):
            raise ValueError("ids must match the number of correspondences")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("correspondence ids must be unique")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "model", model)
        object.__setattr__(self, "ids", ids)

    @classmethod
    def from_list(cls, corrs: Iterable[Correspondence]) -> "CorrespondenceSet":
        corrs = list(corrs)
        if not corrs:
            return cls(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
        return cls(
            np.array([c.image for c in corrs]),
            np.array([c.model for c in corrs]),
            np.array([c.id for c in corrs]),
        )

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[Correspondence]:
        for x, X, i in zip(self.image, self.model, self.ids):
            yield Correspondence(x, X, int(i))

    def __getitem__(self, k: int) -> Correspondence:
        return Correspondence(self.image[k], self.model[k], int(self.ids[k]))

    def subset(self, rows) -> "CorrespondenceSet":
        rows = np.asarray(rows)
        return CorrespondenceSet(self.image[rows], self.model[rows], self.ids[rows])


@dataclass(frozen=True)
class GroundScene:
    """Prior inputs of the one-point problem: intrinsics, pitch and 2D box."""

    K: Intrinsics
    ground: GroundFrame = field(default_factory=GroundFrame)
    bbox: BoundingBox2D | None = None


@dataclass(frozen=True)
class RansacConfig:
    inlier_threshold_px: float = 4.0
    max_iterations: int = 10000
    confidence: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if not self.inlier_threshold_px > 0:
            raise ValueError("inlier_threshold_px must be positive")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass(frozen=True)
class RansacResult:
    pose: Pose
    inlier_ids: frozenset
    iterations_run: int
    hypotheses_evaluated: int
    inlier_mask: np.ndarray
    sample_ids: tuple = ()

    @property
    def n_inliers(self) -> int:
        return len(self.inlier_ids)


class MinimalSolver(Protocol):
    """Anything with ``sample_size`` returning candidate poses for one sample.

    A solver may also provide ``solve_batch(image, model, scene)`` over
    (B, n, ...) arrays returning ``(R, t, owner)``; RANSAC then evaluates
    ``batch_size`` samples per call.
    """

    sample_size: int

    def __call__(self, image: np.ndarray, model: np.ndarray, scene: GroundScene) -> list[Pose]: ...


class P1PSolver:
    """One-point solver bound to an object's 3D box.

    With ``all_candidates`` every case hypothesis passing the range filters
    is returned and RANSAC scores each; otherwise only the best-aligned one.
    """

    sample_size = 1

    def __init__(self, box3d: BoundingBox3D, cases: Sequence[p1p.CaseId] = p1p.ALL_CASES, all_candidates: bool = False):
        self.box3d = box3d
        self.cases = tuple(cases)
        self.all_candidates = all_candidates

    def __call__(self, image, model, scene: GroundScene) -> list[Pose]:
        if scene.bbox is None:
            raise ValueError("the one-point solver needs a 2D bounding box")
        args = (image[0], model[0], scene.bbox, self.box3d, scene.K, scene.ground, self.cases)
        if self.all_candidates:
            found = p1p.candidate_solutions(*args)
            if not found:
                raise NoValidSolution("no case hypothesis survived filtering")
            return [s.pose for s in sorted(found, key=lambda s: s.edge_residual)]
        return [p1p.solve(*args).pose]


class P3PSolver:
    sample_size = 3
    batch_size = 64

    def __call__(self, image, model, scene: GroundScene) -> list[Pose]:
        return solve_p3p(image, model, scene.K)

    def solve_batch(self, image, model, scene: GroundScene):
        return solve_p3p_batch(image, model, scene.K)


def reprojection_error(pose: Pose, K: Intrinsics, corr: Correspondence) -> float:
    """Pixel distance between the projected model point and its observation."""
    uv, valid = project_points(pose, K, corr.model)
    if not valid[0]:
        return math.inf
    return float(np.hypot(*(uv[0] - corr.image)))


def reprojection_errors(pose: Pose, K: Intrinsics, corrs: CorrespondenceSet) -> np.ndarray:
    """Vectorized :func:`reprojection_error`; behind-camera points give +inf."""
    uv, valid = project_points(pose, K, corrs.model)
    err = np.hypot(uv[:, 0] - corrs.image[:, 0], uv[:, 1] - corrs.image[:, 1])
    return np.where(valid, err, np.inf)


def adaptive_iterations(inlier_ratio: float, sample_size: int, confidence: float) -> float:
    """Iterations needed to draw one all-inlier sample with the given confidence."""
    if inlier_ratio >= 1.0:
        return 1
    p_good = inlier_ratio**sample_size
    if p_good <= 0.0:
        return math.inf
    return math.ceil(math.log(1.0 - confidence) / math.log1p(-p_good))


def _score(pose: Pose, K: Intrinsics, corrs: CorrespondenceSet, t_in: float) -> tuple[int, float, np.ndarray]:
    err = reprojection_errors(pose, K, corrs)
    mask = err < t_in
    count = int(mask.sum())
    mean = float(err[mask].mean()) if count else math.inf
    return count, mean, mask


def _score_batch(R: np.ndarray, t: np.ndarray, K: Intrinsics, corrs: CorrespondenceSet, t_in: float):
    """Inlier masks (H, N), counts and mean inlier errors of H poses."""
    H = len(R)
    P = (R.reshape(3 * H, 3) @ corrs.model.T).reshape(H, 3, len(corrs)) + t[:, :, None]
    z = P[:, 2]
    valid = z > 1e-12
    z = np.where(valid, z, 1.0)
    du = K.fx * P[:, 0] / z + K.cx - corrs.image[:, 0]
    dv = K.fy * P[:, 1] / z + K.cy - corrs.image[:, 1]
    err = np.hypot(du, dv)
    mask = valid & (err < t_in)
    counts = mask.sum(axis=1)
    sums = np.where(mask, err, 0.0).sum(axis=1)
    means = np.divide(sums, counts, out=np.full(len(counts), math.inf), where=counts > 0)
    return mask, counts, means


def draw_samples(rng: np.random.Generator, total: int, n: int, m: int) -> np.ndarray:
    """``m`` uniform samples of ``n`` distinct indices from ``range(total)``."""
    rows = np.empty((m, n), dtype=np.int64)
    for k in range(n):
        r = rng.integers(0, total - k, m)
        # step past the already chosen indices in ascending order
        for prev in np.sort(rows[:, :k], axis=1).T:
            r += r >= prev
        rows[:, k] = r
    return rows


def disambiguate(poses: Sequence[Pose], corrs: CorrespondenceSet, K: Intrinsics, t_in: float) -> Pose:
    """Pose with the most inliers; ties go to the lower mean inlier error."""
    if not poses:
        raise ValueError("no poses to choose from")
    best, best_key = poses[0], None
    for pose in poses:
        count, mean, _ = _score(pose, K, corrs, t_in)
        key = (-count, mean)
        if best_key is None or key < best_key:
            best, best_key = pose, key
    return best


def _solve_chunk(solver: MinimalSolver, corrs: CorrespondenceSet, rows: np.ndarray, scene: GroundScene):
    """Poses for a chunk of samples as ``(R, t, owner)`` arrays."""
    if hasattr(solver, "solve_batch"):
        return solver.solve_batch(corrs.image[rows], corrs.model[rows], scene)
    Rs, ts, owner = [], [], []
    for j, r in enumerate(rows):
        try:
            poses = solver(corrs.image[r], corrs.model[r], scene)
        except PoseError:
            continue
        for pose in poses:
            Rs.append(pose.R)
            ts.append(pose.t)
            owner.append(j)
    if not owner:
        return np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    return np.array(Rs), np.array(ts), np.array(owner)


def run(corrs: CorrespondenceSet, scene: GroundScene, solver: MinimalSolver, cfg: RansacConfig = RansacConfig()) -> RansacResult:
    """Sample, solve, score; keep the hypothesis with the most inliers.

    The iteration bound shrinks to ``ceil(log(1-conf) / log(1-w^n))`` whenever
    a better hypothesis raises the best inlier ratio ``w``.  Samples are drawn
    and solved in chunks (one per call for solvers without ``solve_batch``),
    but the bookkeeping is sequential: only samples up to the bound count.
    """
    n = solver.sample_size
    total = len(corrs)
    if total < n:
        raise ValueError(f"need at least {n} correspondences, got {total}")
    rng = np.random.default_rng(cfg.seed)
    t_in = cfg.inlier_threshold_px
    chunk = max(1, int(getattr(solver, "batch_size", 1)))

    best = None  # (R, t, mask, rows)
    best_count, best_mean = 0, math.inf
    limit = cfg.max_iterations
    iterations = hypotheses = 0
    while iterations < limit:
        m = int(min(chunk, limit - iterations))
        rows = draw_samples(rng, total, n, m)
        R, t, owner = _solve_chunk(solver, corrs, rows, scene)
        masks, counts, means = _score_batch(R, t, scene.K, corrs, t_in)
        h = 0
        for j in range(m):
            iterations += 1
            while h < len(owner) and owner[h] == j:
                hypotheses += 1
                count, mean = int(counts[h]), float(means[h])
                if count > best_count or (count == best_count and count > 0 and mean < best_mean):
                    improved = count > best_count
                    best = (R[h], t[h], masks[h], rows[j])
                    best_count, best_mean = count, mean
                    if improved:
                        limit = min(cfg.max_iterations, adaptive_iterations(count / total, n, cfg.confidence))
                h += 1
            if iterations >= limit:
                break

    if best is None or best_count < n + 1:
        raise NoValidSolution(f"best hypothesis has {best_count} inliers; need at least {n + 1}")
    R, t, mask, rows = best
    return RansacResult(
        pose=Pose(R, t),
        inlier_ids=frozenset(int(i) for i in corrs.ids[mask]),
        iterations_run=iterations,
        hypotheses_evaluated=hypotheses,
        inlier_mask=mask,
        sample_ids=tuple(int(i) for i in corrs.ids[rows]),
    )
