"""Line-oriented text formats for scenes, shape models and results.

Scene file::

    intrinsics <fx> <fy> <cx> <cy>
    pitch_deg <deg>
    shape_model <path>                  # optional, relative to the scene file
    object <name>
    bbox <x_min> <y_min> <x_max> <y_max>
    footprint <x1> <z1> <x2> <z2> <x3> <z3> <x4> <z4>
    forward <x> <z>
    heights <y_min> <y_max>             # optional
    keypoint <id> <u> <v> <X> <Y> <Z>   # repeated
    end

Blank lines and ``#`` comments are ignored.  Floats are written with
``repr`` so that reading a written file reproduces it exactly.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, Pose
from .p1p import BoundingBox2D, BoundingBox3D
from .ransac import CorrespondenceSet
from .refine import ShapeModel


class ParseError(ValueError):
    def __init__(self, path, line: int, key: str, message: str):
        self.path, self.line, self.key = path, line, key
        super().__init__(f"{path}:{line}: {key}: {message}")


@dataclass
class SceneObject:
    name: str
    bbox: BoundingBox2D
    box3d: BoundingBox3D
    keypoints: CorrespondenceSet


@dataclass
class SceneFile:
    intrinsics: Intrinsics
    pitch_deg: float
    objects: list[SceneObject] = field(default_factory=list)
    shape_model: str | None = None


def _f(x: float) -> str:
    return repr(float(x))


def _tokens(path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if line:
                key, *rest = line.split()
                yield lineno, key, rest


def _floats(path, lineno, key, values, n=None) -> list[float]:
    if n is not None and len(values) != n:
        raise ParseError(path, lineno, key, f"expected {n} numbers, got {len(values)}")
    try:
        out = [float(v) for v in values]
    except ValueError as exc:
        raise ParseError(path, lineno, key, str(exc)) from None
    if not all(math.isfinite(v) for v in out):
        raise ParseError(path, lineno, key, "values must be finite")
    return out


def read_scene(path) -> SceneFile:
    intrinsics = pitch = shape = None
    objects: list[SceneObject] = []
    obj = None
    lineno = 0
    for lineno, key, rest in _tokens(path):
        if obj is None:
            if key == "intrinsics":
                try:
                    intrinsics = Intrinsics(*_floats(path, lineno, key, rest, 4))
                except ValueError as exc:
                    if isinstance(exc, ParseError):
                        raise
                    raise ParseError(path, lineno, key, str(exc)) from None
            elif key == "pitch_deg":
                (pitch,) = _floats(path, lineno, key, rest, 1)
            elif key == "shape_model":
                if len(rest) != 1:
                    raise ParseError(path, lineno, key, "expected one path")
                shape = rest[0]
            elif key == "object":
                if len(rest) != 1:
                    raise ParseError(path, lineno, key, "expected one name")
                obj = {"name": rest[0], "line": lineno, "keypoints": [], "ids": set()}
            else:
                raise ParseError(path, lineno, key, "unknown key")
            continue
        if key == "bbox":
            v = _floats(path, lineno, key, rest, 4)
            try:
                obj["bbox"] = BoundingBox2D(*v)
            except ValueError as exc:
                raise ParseError(path, lineno, key, str(exc)) from None
        elif key == "footprint":
            obj["footprint"] = (lineno, np.array(_floats(path, lineno, key, rest, 8)).reshape(4, 2))
        elif key == "forward":
            obj["forward"] = (lineno, np.array(_floats(path, lineno, key, rest, 2)))
        elif key == "heights":
            obj["heights"] = tuple(_floats(path, lineno, key, rest, 2))
        elif key == "keypoint":
            if len(rest) != 6:
                raise ParseError(path, lineno, key, f"expected id and 5 numbers, got {len(rest)} fields")
            try:
                kid = int(rest[0])
            except ValueError:
                raise ParseError(path, lineno, key, f"bad id {rest[0]!r}") from None
            if kid in obj["ids"]:
                raise ParseError(path, lineno, key, f"duplicate id {kid}")
            obj["ids"].add(kid)
            obj["keypoints"].append((kid, _floats(path, lineno, key, rest[1:], 5)))
        elif key == "end":
            objects.append(_finish_object(path, lineno, obj))
            obj = None
        else:
            raise ParseError(path, lineno, key, "unknown key inside object")
    if obj is not None:
        raise ParseError(path, lineno, "object", f"object {obj['name']!r} is missing 'end'")
    if intrinsics is None:
        raise ParseError(path, lineno, "intrinsics", "missing")
    if pitch is None:
        raise ParseError(path, lineno, "pitch_deg", "missing")
    return SceneFile(intrinsics, pitch, objects, shape)


def _finish_object(path, lineno, obj) -> SceneObject:
    for key in ("bbox", "footprint", "forward"):
        if key not in obj:
            raise ParseError(path, lineno, key, f"missing in object {obj['name']!r}")
    fp_line, corners = obj["footprint"]
    _, forward = obj["forward"]
    try:
        box3d = BoundingBox3D(corners, forward, obj.get("heights"))
    except ValueError as exc:
        raise ParseError(path, fp_line, "footprint", str(exc)) from None
    kps = obj["keypoints"]
    ids = np.array([k for k, _ in kps], dtype=np.int64)
    vals = np.array([v for _, v in kps], dtype=float).reshape(-1, 5)
    return SceneObject(obj["name"], obj["bbox"], box3d, CorrespondenceSet(vals[:, :2], vals[:, 2:], ids))


def write_scene(path, scene: SceneFile) -> None:
    K = scene.intrinsics
    lines = [f"intrinsics {_f(K.fx)} {_f(K.fy)} {_f(K.cx)} {_f(K.cy)}", f"pitch_deg {_f(scene.pitch_deg)}"]
    if scene.shape_model:
        lines.append(f"shape_model {scene.shape_model}")
    for obj in scene.objects:
        lines.append(f"object {obj.name}")
        lines.append("bbox " + " ".join(_f(v) for v in obj.bbox.as_tuple()))
        lines.append("footprint " + " ".join(_f(v) for v in obj.box3d.corners.ravel()))
        lines.append("forward " + " ".join(_f(v) for v in obj.box3d.forward))
        if obj.box3d.heights is not None:
            lines.append("heights " + " ".join(_f(v) for v in obj.box3d.heights))
        for x, X, i in zip(obj.keypoints.image, obj.keypoints.model, obj.keypoints.ids):
            lines.append(f"keypoint {int(i)} " + " ".join(_f(v) for v in (*x, *X)))
        lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def resolve_shape_model(scene_path, scene: SceneFile) -> ShapeModel | None:
    if not scene.shape_model:
        return None
    p = Path(scene.shape_model)
    if not p.is_absolute():
        p = Path(os.path.dirname(os.fspath(scene_path))) / p
    return read_shape_model(p)


# -- shape model -------------------------------------------------------------
#
#   class <name>
#   n_points <N>
#   n_basis <M>
#   mean <X> <Y> <Z>          # N lines, in point-id order
#   basis <j> <X> <Y> <Z>     # N lines per basis shape j = 0..M-1


def read_shape_model(path) -> ShapeModel:
    name, N, M = "", None, None
    mean, basis = [], []
    for lineno, key, rest in _tokens(path):
        if key == "class":
            name = " ".join(rest)
        elif key in ("n_points", "n_basis"):
            if len(rest) != 1 or not rest[0].isdigit():
                raise ParseError(path, lineno, key, "expected a non-negative integer")
            if key == "n_points":
                N = int(rest[0])
            else:
                M = int(rest[0])
                basis = [[] for _ in range(M)]
        elif key == "mean":
            mean.append(_floats(path, lineno, key, rest, 3))
        elif key == "basis":
            if M is None:
                raise ParseError(path, lineno, key, "n_basis must come first")
            if not rest or not rest[0].isdigit() or int(rest[0]) >= M:
                raise ParseError(path, lineno, key, f"basis index must lie in [0, {M})")
            basis[int(rest[0])].append(_floats(path, lineno, key, rest[1:], 3))
        else:
            raise ParseError(path, lineno, key, "unknown key")
    if N is None or M is None:
        raise ParseError(path, 0, "n_points" if N is None else "n_basis", "missing")
    if len(mean) != N:
        raise ParseError(path, 0, "mean", f"expected {N} rows, got {len(mean)}")
    for j, rows in enumerate(basis):
        if len(rows) != N:
            raise ParseError(path, 0, "basis", f"basis {j} has {len(rows)} rows, expected {N}")
    return ShapeModel(np.array(mean, dtype=float).reshape(N, 3), np.array(basis, dtype=float).reshape(M, N, 3), name)


def write_shape_model(path, model: ShapeModel) -> None:
    lines = [f"class {model.class_name}", f"n_points {model.n_points}", f"n_basis {model.M}"]
    lines += ["mean " + " ".join(_f(v) for v in row) for row in model.mean]
    for j in range(model.M):
        lines += [f"basis {j} " + " ".join(_f(v) for v in row) for row in model.basis[j]]
    Path(path).write_text("\n".join(lines) + "\n")


# -- key/value records (ground truth sidecars, estimate output) ---------------


def format_pose(pose: Pose) -> list[str]:
    return [
        "rotation " + " ".join(_f(v) for v in pose.R.ravel()),
        "translation " + " ".join(_f(v) for v in pose.t),
    ]


def read_records(path) -> list[dict]:
    """Blocks of ``key values...`` lines opened by ``object <name>`` and closed by ``end``."""
    blocks, cur = [], None
    for lineno, key, rest in _tokens(path):
        if key == "object":
            cur = {"object": " ".join(rest)}
        elif key == "end":
            if cur is None:
                raise ParseError(path, lineno, key, "'end' without 'object'")
            blocks.append(cur)
            cur = None
        elif cur is None:
            raise ParseError(path, lineno, key, "outside an object block")
        else:
            cur[key] = rest
    if cur is not None:
        raise ParseError(path, lineno, "object", "missing 'end'")
    return blocks


def record_pose(path, block: dict) -> Pose:
    R = _floats(path, 0, "rotation", block.get("rotation", []), 9)
    t = _floats(path, 0, "translation", block.get("translation", []), 3)
    return Pose(np.array(R).reshape(3, 3), np.array(t))
