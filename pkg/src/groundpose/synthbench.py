"""Synthetic scenes, error metrics and the experiment sweeps E1-E4.

Each trial draws its randomness from child streams of
``SeedSequence([seed, trial])``; the swept setting is not part of the seed,
so every setting of a sweep sees the same base scenes (common random
numbers), which keeps trend comparisons across settings low-variance.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateGeometry,
    DegenerateRay,
    InsufficientInliers,
    NoValidSolution,
    SingularNormalEquations,
    ZeroEstimate,
)
from .geometry import GroundFrame, Intrinsics, Pose, project_points, rotation_y
from .p1p import BoundingBox2D, BoundingBox3D
from .pipeline import parse_method, refine_hypothesis, run_hypothesis
from .ransac import CorrespondenceSet, GroundScene, RansacConfig
from .refine import RobustConfig, ShapeModel, reprojection_residuals

ESTIMATION_FAILURES = (
    NoValidSolution,
    SingularNormalEquations,
    InsufficientInliers,
    DegenerateGeometry,
    DegenerateRay,
)
MAX_VALID_ROTATION_ERROR_DEG = 90.0


@dataclass(frozen=True)
class SynthConfig:
    focal_px: float = 800.0
    image_w: int = 640
    image_h: int = 480
    cube_half_extent: float = 2.0
    center_x: tuple[float, float] = (-4.0, 4.0)
    center_y: tuple[float, float] = (-1.0, 1.0)
    center_z: tuple[float, float] = (20.0, 40.0)
    yaw_range: tuple[float, float] = (-math.pi, math.pi)
    n_points: int = 300
    noise_sigma_px: float = 2.0
    pitch_deg: float = 0.0
    outlier_ratio: float = 0.5
    pitch_error_deg: float = 0.0
    bbox_error_px: float = 0.0
    n_trials: int = 1000
    seed: int = 0
    # optional synthetic linear shape model: M basis shapes with N(0, std)
    # per-coordinate entries and coefficients drawn from N(0, 1)
    n_shape_basis: int = 0
    shape_basis_std: float = 0.1

    def __post_init__(self):
        for name in ("center_x", "center_y", "center_z", "yaw_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must be a non-empty range, got {(lo, hi)}")
        if not 0 <= self.outlier_ratio < 1:
            raise ValueError("outlier_ratio must lie in [0, 1)")
        if self.n_points < 4:
            raise ValueError("n_points must be at least 4")
        if not (self.focal_px > 0 and self.cube_half_extent > 0 and self.image_w > 0 and self.image_h > 0):
            raise ValueError("focal length, image size and cube extent must be positive")
        if self.noise_sigma_px < 0 or self.n_trials < 0 or self.n_shape_basis < 0:
            raise ValueError("noise, trial count and basis size must be non-negative")
        if self.center_z[0] <= self.cube_half_extent * math.sqrt(3):
            raise ValueError("objects must lie entirely in front of the camera")

    @property
    def K(self) -> Intrinsics:
        return Intrinsics(self.focal_px, self.focal_px, self.image_w / 2.0, self.image_h / 2.0)

    def replace(self, **changes) -> "SynthConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class SynthScene:
    gt_pose: Pose
    corrs: CorrespondenceSet
    inlier_mask: np.ndarray
    bbox: BoundingBox2D
    box3d: BoundingBox3D
    scene: GroundScene
    yaw: float
    shape_model: ShapeModel
    coeffs_gt: np.ndarray
    ransac_seed: int
    true_ground: GroundFrame
    trial: int = 0

    @property
    def local_yaw(self) -> float:
        """Object yaw relative to the BEV direction of its center."""
        t_g = self.true_ground.r_cg.T @ self.gt_pose.t
        return float(math.remainder(self.yaw - math.atan2(t_g[0], t_g[2]), 2.0 * math.pi))


def generate(cfg: SynthConfig, trial: int) -> SynthScene:
    """One synthetic scene, fully determined by ``(cfg.seed, trial)``."""
    ss = np.random.SeedSequence([int(cfg.seed) & 0xFFFFFFFFFFFFFFFF, int(trial)])
    geo, noise, outl, bb, shp, rs = (np.random.default_rng(s) for s in ss.spawn(6))
    n = cfg.n_points
    h = cfg.cube_half_extent

    mean = geo.uniform(-h, h, (n, 3))
    center = np.array([geo.uniform(*cfg.center_x), geo.uniform(*cfg.center_y), geo.uniform(*cfg.center_z)])
    yaw = geo.uniform(*cfg.yaw_range)

    M = cfg.n_shape_basis
    basis = shp.normal(0.0, cfg.shape_basis_std, (M, n, 3))
    coeffs_gt = shp.normal(0.0, 1.0, M)
    model = ShapeModel(mean, basis)
    points = model.points(coeffs_gt)

    true_ground = GroundFrame.from_degrees(cfg.pitch_deg)
    gt_pose = Pose(true_ground.r_cg @ rotation_y(yaw), center)
    K = cfg.K

    # the estimator only knows the mean shape's box; the observed 2D box comes
    # from the object's actual extent
    box3d = BoundingBox3D.from_extents(
        mean[:, 0].min(), mean[:, 0].max(), mean[:, 2].min(), mean[:, 2].max(), (mean[:, 1].min(), mean[:, 1].max())
    )
    true_box = BoundingBox3D.from_extents(
        points[:, 0].min(),
        points[:, 0].max(),
        points[:, 2].min(),
        points[:, 2].max(),
        (points[:, 1].min(), points[:, 1].max()),
    )
    uv_box, _ = project_points(gt_pose, K, true_box.box_corners())
    shift = cfg.bbox_error_px * bb.uniform(-1.0, 1.0, 4)
    bbox = BoundingBox2D(
        uv_box[:, 0].min() + shift[0],
        uv_box[:, 1].min() + shift[1],
        uv_box[:, 0].max() + shift[2],
        uv_box[:, 1].max() + shift[3],
    )

    uv, _ = project_points(gt_pose, K, points)
    uv = uv + noise.normal(0.0, 1.0, (n, 2)) * cfg.noise_sigma_px
    # the outlier set at ratio r is a prefix of one permutation, so sets are
    # nested across ratios
    order = outl.permutation(n)
    random_px = outl.uniform(0.0, 1.0, (n, 2)) * [cfg.image_w, cfg.image_h]
    n_out = int(math.floor(cfg.outlier_ratio * n + 1e-9))
    out_rows = order[:n_out]
    uv[out_rows] = random_px[out_rows]
    inlier_mask = np.ones(n, dtype=bool)
    inlier_mask[out_rows] = False

    prior = GroundFrame.from_degrees(cfg.pitch_deg + cfg.pitch_error_deg)
    return SynthScene(
        gt_pose=gt_pose,
        corrs=CorrespondenceSet(uv, mean),
        inlier_mask=inlier_mask,
        bbox=bbox,
        box3d=box3d,
        scene=GroundScene(K, prior, bbox),
        yaw=float(yaw),
        shape_model=model,
        coeffs_gt=coeffs_gt,
        ransac_seed=int(rs.integers(0, 2**63)),
        true_ground=true_ground,
        trial=int(trial),
    )


# -- metrics ---------------------------------------------------------------


def _vector_angle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Angle between row vectors, in degrees.

    ``atan2(|a x b|, a . b)`` equals ``arccos`` of the normalized dot product
    but keeps full precision near 0 and 180 degrees, where ``arccos`` bottoms
    out around 1e-6 degrees.
    """
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.sum(a * b, axis=-1)
    return np.degrees(np.arctan2(cross, dot))


def rotation_error(R: np.ndarray, R_gt: np.ndarray) -> float:
    """Largest angle (degrees) between corresponding columns."""
    R = np.asarray(R, dtype=float)
    R_gt = np.asarray(R_gt, dtype=float)
    return float(_vector_angle(R.T, R_gt.T).max())


def translation_error(t, t_gt) -> float:
    """``||t_gt - t|| / ||t|| * 100``, normalized by the estimate."""
    t = np.asarray(t, dtype=float)
    nt = np.linalg.norm(t)
    if nt == 0:
        raise ZeroEstimate("estimated translation is zero")
    return float(np.linalg.norm(np.asarray(t_gt, dtype=float) - t) / nt * 100.0)


def angular_translation_error(t, t_gt) -> float:
    t = np.asarray(t, dtype=float)
    t_gt = np.asarray(t_gt, dtype=float)
    nt, ng = np.linalg.norm(t), np.linalg.norm(t_gt)
    if nt == 0 or ng == 0:
        raise ZeroEstimate("zero translation vector")
    return float(_vector_angle(t, t_gt))


def vertex_error(
    model: ShapeModel, coeffs, coeffs_gt, scale_adjust: bool = False, t=None, t_gt=None
) -> float:
    """Mean vertex distance between two shape instances of ``model``.

    With ``scale_adjust`` the reconstruction is scaled by ``||t_gt|| / ||t||``
    first, which removes the depth/size ambiguity of monocular estimates.
    """
    X = model.points(coeffs)
    X_gt = model.points(coeffs_gt)
    if scale_adjust:
        if t is None or t_gt is None:
            raise ValueError("scale adjustment needs both translations")
        nt = np.linalg.norm(t)
        if nt == 0:
            raise ZeroEstimate("estimated translation is zero")
        X = X * (np.linalg.norm(t_gt) / nt)
    return float(np.linalg.norm(X - X_gt, axis=1).mean())


# -- experiments -----------------------------------------------------------


@dataclass
class BenchRecord:
    experiment: str
    setting: float
    method: str
    trial: int
    failed: bool
    failure: str = ""
    e_r_deg: float = math.nan
    e_t_pct: float = math.nan
    e_a_deg: float = math.nan
    e_v: float = math.nan
    n_inliers: int = 0
    iterations: int = 0
    wall_time_ms: float | None = None


@dataclass(frozen=True)
class Experiment:
    name: str
    variable: str
    settings: tuple
    methods: tuple


EXPERIMENTS = {
    "E1": Experiment("E1", "outlier_ratio", tuple(round(0.1 * k, 1) for k in range(1, 10)), ("p1p+gn", "p3p+gn")),
    "E2": Experiment("E2", "n_points", (50,) + tuple(range(100, 1001, 100)), ("p1p+gn", "p3p+gn")),
    "E3": Experiment("E3", "pitch_error_deg", tuple(float(k) for k in range(-5, 6)), ("p1p+gn", "p3p+gn")),
    "E4": Experiment("E4", "bbox_error_px", tuple(float(k) for k in range(-5, 6)), ("p1p+gn", "p3p+gn")),
    "HRE-E3": Experiment("HRE-E3", "pitch_error_deg", tuple(float(k) for k in range(-5, 6)), ("p1p+gn", "p1p+hre")),
    "HRE-E4": Experiment("HRE-E4", "bbox_error_px", tuple(float(k) for k in range(-5, 6)), ("p1p+gn", "p1p+hre")),
}
_ALIASES = {"e1": "E1", "e2": "E2", "e3": "E3", "e4": "E4", "hre3": "HRE-E3", "hre4": "HRE-E4"}


def experiment(which: str) -> Experiment:
    key = _ALIASES.get(which.lower(), which.upper())
    if key not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {which!r}; choose from {', '.join(_ALIASES)}")
    return EXPERIMENTS[key]


def run_trial(
    scene: SynthScene,
    methods: Sequence[str],
    experiment_name: str = "",
    setting: float = math.nan,
    ransac_cfg: RansacConfig = RansacConfig(),
    robust: RobustConfig = RobustConfig(),
    timing: bool = False,
) -> list[BenchRecord]:
    """Run each method on one scene; methods sharing a solver share its RANSAC run."""
    parsed = [parse_method(m) for m in methods]
    cfg = dataclasses.replace(ransac_cfg, seed=scene.ransac_seed)
    model = scene.shape_model if scene.shape_model.M else None
    K = scene.scene.K
    hyps: dict[str, tuple] = {}
    out = []
    for method, (solver, refiner) in zip(methods, parsed):
        if solver not in hyps:
            t0 = time.perf_counter()
            try:
                hyps[solver] = (run_hypothesis(scene.corrs, scene.scene, solver, scene.box3d, cfg), None)
            except ESTIMATION_FAILURES as exc:
                hyps[solver] = (None, type(exc).__name__)
            hyps[solver] += ((time.perf_counter() - t0) * 1e3,)
        hyp, err, t_hyp = hyps[solver]
        rec = BenchRecord(experiment_name, setting, method, scene.trial, failed=True, failure=err or "")
        if hyp is not None:
            rec.iterations = hyp.iterations_run
            t0 = time.perf_counter()
            try:
                est = refine_hypothesis(scene.corrs, scene.scene, hyp, refiner, model, robust)
            except ESTIMATION_FAILURES as exc:
                rec.failure = type(exc).__name__
                est = None
            t_ref = (time.perf_counter() - t0) * 1e3
            if timing:
                rec.wall_time_ms = t_hyp + t_ref
            if est is not None:
                _fill_metrics(rec, est.pose, est.coeffs, scene, model, K, ransac_cfg.inlier_threshold_px)
        out.append(rec)
    return out


def _fill_metrics(rec, pose, coeffs, scene, model, K, t_in) -> None:
    gt = scene.gt_pose
    rec.e_r_deg = rotation_error(pose.R, gt.R)
    try:
        rec.e_t_pct = translation_error(pose.t, gt.t)
        rec.e_a_deg = angular_translation_error(pose.t, gt.t)
    except ZeroEstimate:
        rec.failure = "ZeroEstimate"
        return
    if model is not None:
        rec.e_v = vertex_error(model, coeffs, scene.coeffs_gt)
    else:
        rec.e_v = 0.0
    rec.n_inliers = int(np.sum(reprojection_residuals(pose, coeffs, model, K, scene.corrs) < t_in))
    if rec.e_r_deg > MAX_VALID_ROTATION_ERROR_DEG:
        rec.failure = "RotationError>90"
        return
    rec.failed = False
    rec.failure = ""


def run_experiment(
    which: str,
    methods: Sequence[str] | None = None,
    n_trials: int | None = None,
    seed: int = 0,
    overrides: dict | None = None,
    settings: Iterable | None = None,
    ransac_cfg: RansacConfig = RansacConfig(),
    robust: RobustConfig = RobustConfig(),
    timing: bool = False,
) -> list[BenchRecord]:
    """Sweep one experiment's variable; records come out in (setting, trial, method) order."""
    exp = experiment(which)
    methods = tuple(methods or exp.methods)
    for m in methods:
        parse_method(m)
    base = SynthConfig(seed=seed, **(overrides or {}))
    n_trials = base.n_trials if n_trials is None else n_trials
    records = []
    for value in exp.settings if settings is None else tuple(settings):
        cfg = base.replace(**{exp.variable: value})
        for trial in range(n_trials):
            scene = generate(cfg, trial)
            records.extend(run_trial(scene, methods, exp.name, value, ransac_cfg, robust, timing))
    return records


# -- aggregation and output -------------------------------------------------

CSV_HEADER = (
    "experiment",
    "setting",
    "method",
    "trials",
    "failures",
    "mean_e_r_deg",
    "mean_e_t_pct",
    "mean_e_a_deg",
    "mean_e_v",
    "mean_inliers",
    "mean_iterations",
    "mean_time_ms",
)


@dataclass
class Summary:
    experiment: str
    setting: float
    method: str
    trials: int
    failures: int
    mean_e_r_deg: float
    mean_e_t_pct: float
    mean_e_a_deg: float
    mean_e_v: float
    mean_inliers: float
    mean_iterations: float
    mean_time_ms: float | None
    median_time_ms: float | None = None
    e_r_values: np.ndarray = field(default=None, repr=False)


def _mean(values) -> float:
    values = np.asarray(values, dtype=float)
    return float(values.mean()) if values.size else math.nan


def aggregate(records: Sequence[BenchRecord]) -> list[Summary]:
    """Per (setting, method) means over non-failed trials, in first-seen order."""
    groups: dict[tuple, list[BenchRecord]] = {}
    for r in records:
        groups.setdefault((r.experiment, r.setting, r.method), []).append(r)
    out = []
    for (exp, setting, method), rs in groups.items():
        ok = [r for r in rs if not r.failed]
        times = [r.wall_time_ms for r in rs if r.wall_time_ms is not None and not r.failed]
        out.append(
            Summary(
                experiment=exp,
                setting=setting,
                method=method,
                trials=len(rs),
                failures=len(rs) - len(ok),
                mean_e_r_deg=_mean([r.e_r_deg for r in ok]),
                mean_e_t_pct=_mean([r.e_t_pct for r in ok]),
                mean_e_a_deg=_mean([r.e_a_deg for r in ok]),
                mean_e_v=_mean([r.e_v for r in ok]),
                mean_inliers=_mean([r.n_inliers for r in ok]),
                mean_iterations=_mean([r.iterations for r in ok]),
                mean_time_ms=_mean(times) if times else None,
                median_time_ms=float(np.median(times)) if times else None,
                e_r_values=np.array([r.e_r_deg for r in ok]),
            )
        )
    return out


def bootstrap_ci(values, confidence: float = 0.95, n_resamples: int = 2000, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval of the mean."""
    from scipy.stats import bootstrap

    values = np.asarray(values, dtype=float)
    if values.size < 2:
        raise ValueError("need at least two values to bootstrap")
    res = bootstrap(
        (values,),
        np.mean,
        confidence_level=confidence,
        n_resamples=n_resamples,
        method="percentile",
        random_state=np.random.default_rng(seed),
    )
    return float(res.confidence_interval.low), float(res.confidence_interval.high)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".6g")


def csv_text(summaries: Sequence[Summary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for s in summaries:
        w.writerow([s.experiment, _fmt(s.setting), s.method] + [_fmt(getattr(s, k)) for k in CSV_HEADER[3:]])
    return buf.getvalue()


def write_csv(path, summaries: Sequence[Summary]) -> None:
    with open(path, "w", newline="") as f:
        f.write(csv_text(summaries))


def _json_value(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def write_json(path, records: Sequence[BenchRecord], summaries: Sequence[Summary] | None = None) -> None:
    """Per-trial records plus the summary rows (including median times)."""
    summaries = aggregate(records) if summaries is None else summaries
    doc = {
        "records": [{k: _json_value(v) for k, v in dataclasses.asdict(r).items()} for r in records],
        "summary": [
            {k: _json_value(getattr(s, k)) for k in CSV_HEADER + ("median_time_ms",)} for s in summaries
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def format_table(summaries: Sequence[Summary]) -> str:
    cols = ("setting", "method", "trials", "failures", "mean_e_r_deg", "mean_e_t_pct", "mean_inliers", "mean_iterations")
    rows = [[_fmt(getattr(s, c)) if c != "method" else s.method for c in cols] for s in summaries]
    widths = [max(len(c), *(len(r[i]) for r in rows)) if rows else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in rows]
    return "\n".join(lines)
