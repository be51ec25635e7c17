"""Grasp and shift motion primitives: parameters, bounds, poses and feasibility."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from .heightmap import GridSpec, Heightmap, pixel_to_world, rotate_pixel

GRASP = "grasp"
SHIFT = "shift"
KINDS = (GRASP, SHIFT)

GRASP_Z_OFFSET = 0.015
SHIFT_Z_OFFSET = 0.010
SHIFT_Z_FLOOR = 0.005

# Yaw spans the full circle: the wrist camera makes the tool asymmetric under a
# half turn, so a half-circle range cannot represent rotated poses exactly.
ANGLE_45 = math.pi / 4
GRASP_BOUNDS = {
    "pitch": (-ANGLE_45, ANGLE_45),
    "yaw": (-math.pi, math.pi),
    "width": (0.01, 0.08),
}
SHIFT_BOUNDS = {
    "roll": (-ANGLE_45, ANGLE_45),
    "pitch": (-ANGLE_45, ANGLE_45),
    "yaw": (-math.pi, math.pi),
    "push_dir": (-math.pi, math.pi),
    "push_dist": (0.02, 0.15),
}
BOUNDS = {GRASP: GRASP_BOUNDS, SHIFT: SHIFT_BOUNDS}
ACTION_DIM = {GRASP: 3, SHIFT: 5}
_BOUND_TOL = 1e-9


def wrap_angle(a: float) -> float:
    """Wrap into [-pi, pi)."""
    w = math.fmod(a + math.pi, 2 * math.pi)
    if w < 0:
        w += 2 * math.pi
    w -= math.pi
    return -math.pi if w >= math.pi else w


@dataclass(frozen=True)
class GraspParams:
    row: int
    col: int
    pitch: float = 0.0
    yaw: float = 0.0
    width: float = 0.08

    @property
    def roll(self) -> float:
        return 0.0

    def continuous(self) -> tuple[float, ...]:
        return self.pitch, self.yaw, self.width


@dataclass(frozen=True)
class ShiftParams:
    row: int
    col: int
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0
    push_dir: float = 0.0
    push_dist: float = 0.05

    def continuous(self) -> tuple[float, ...]:
        return self.roll, self.pitch, self.yaw, self.push_dir, self.push_dist


PARAM_TYPES = {GRASP: GraspParams, SHIFT: ShiftParams}


def check_bounds(kind: str, values) -> None:
    for (name, (lo, hi)), v in zip(BOUNDS[kind].items(), values):
        if not (lo - _BOUND_TOL <= v <= hi + _BOUND_TOL) or not math.isfinite(v):
            raise ValueError(f"{kind} {name}={v} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class PrimitiveAction:
    kind: str
    params: GraspParams | ShiftParams
    z: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        if not isinstance(self.params, PARAM_TYPES[self.kind]):
            raise TypeError(f"{self.kind} action needs {PARAM_TYPES[self.kind].__name__}")
        if self.z < 0:
            raise ValueError("z must be non-negative")

    @property
    def pixel(self) -> tuple[int, int]:
        return self.params.row, self.params.col

    def normalized(self) -> np.ndarray:
        return normalize(self.params)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        for f in fields(self.params):
            d[f.name] = getattr(self.params, f.name)
        d["z"] = self.z
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PrimitiveAction":
        ptype = PARAM_TYPES[d["kind"]]
        params = ptype(**{f.name: d[f.name] for f in fields(ptype)})
        return cls(d["kind"], params, float(d["z"]))


def normalize(params: GraspParams | ShiftParams) -> np.ndarray:
    """Map continuous parameters affinely to [-1, 1] per channel."""
    kind = GRASP if isinstance(params, GraspParams) else SHIFT
    values = params.continuous()
    check_bounds(kind, values)
    out = np.empty(len(values))
    for i, (lo, hi) in enumerate(BOUNDS[kind].values()):
        out[i] = 2.0 * (values[i] - lo) / (hi - lo) - 1.0
    return out


def denormalize(kind: str, vector, row: int, col: int) -> GraspParams | ShiftParams:
    vec = np.asarray(vector, dtype=np.float64)
    if vec.shape != (ACTION_DIM[kind],):
        raise ValueError(f"{kind} vector must have {ACTION_DIM[kind]} entries, got shape {vec.shape}")
    if np.any(~np.isfinite(vec)) or np.any(np.abs(vec) > 1 + _BOUND_TOL):
        raise ValueError(f"normalized vector outside [-1, 1]: {vec}")
    vals = [lo + (float(v) + 1.0) * 0.5 * (hi - lo) for v, (lo, hi) in zip(vec, BOUNDS[kind].values())]
    return PARAM_TYPES[kind](int(row), int(col), *vals)


def extract_z(hm: Heightmap, row: int, col: int, kind: str) -> float:
    h, w = hm.spec.shape
    if not (0 <= row < h and 0 <= col < w):
        raise IndexError(f"pixel ({row}, {col}) outside the {h}x{w} grid")
    surface = float(hm.z[row, col])
    if kind == GRASP:
        return max(surface - GRASP_Z_OFFSET, 0.0)
    return max(surface - SHIFT_Z_OFFSET, SHIFT_Z_FLOOR)


def make_action(kind: str, params, hm: Heightmap) -> PrimitiveAction:
    return PrimitiveAction(kind, params, extract_z(hm, params.row, params.col, kind))


def rotate_action(a: PrimitiveAction, angle: float, spec: GridSpec) -> PrimitiveAction | None:
    """Rotate an action together with its heightmap; ``None`` if the pixel leaves the frame."""
    row, col = rotate_pixel(spec, a.params.row, a.params.col, angle)
    if not (0 <= row < spec.height_px and 0 <= col < spec.width_px):
        return None
    p = a.params
    if angle == 0.0:
        return a
    if a.kind == GRASP:
        params = replace(p, row=row, col=col, yaw=wrap_angle(p.yaw + angle))
    else:
        params = replace(p, row=row, col=col, yaw=wrap_angle(p.yaw + angle),
                         push_dir=wrap_angle(p.push_dir + angle))
    return PrimitiveAction(a.kind, params, a.z)


def rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


@dataclass(frozen=True)
class Pose:
    """Tool pose: position plus intrinsic roll-pitch-yaw about tool x, y, z."""
    position: tuple[float, float, float]
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    @property
    def matrix(self) -> np.ndarray:
        return rot_z(self.yaw) @ rot_y(self.pitch) @ rot_x(self.roll)

    def transform(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.matrix.T + np.asarray(self.position)

    def translated(self, dx: float, dy: float) -> "Pose":
        x, y, z = self.position
        return replace(self, position=(x + dx, y + dy, z))


def pose_of(a: PrimitiveAction, spec: GridSpec) -> Pose:
    x, y = pixel_to_world(spec, a.params.row, a.params.col)
    p = a.params
    roll = p.roll if a.kind == SHIFT else 0.0
    return Pose((x, y, a.z), roll, p.pitch, p.yaw)


@dataclass(frozen=True)
class GripperModel:
    finger_base_height: float = 0.05
    wrist_offset: tuple[float, float, float] = (0.0, 0.0, 0.10)
    camera_offset: tuple[float, float, float] = (0.05, 0.0, 0.12)
    finger_thickness: float = 0.01  # along the closing axis
    finger_breadth: float = 0.02

    def sites(self, width: float) -> np.ndarray:
        """Sites of interest in the tool frame, ``(6, 3)``; fingertips first."""
        h = width / 2
        return np.array([
            [h, 0, 0], [-h, 0, 0],
            [h, 0, self.finger_base_height], [-h, 0, self.finger_base_height],
            self.wrist_offset, self.camera_offset,
        ], dtype=np.float64)


@dataclass(frozen=True)
class BinBox:
    x0: float = -0.20
    x1: float = 0.20
    y0: float = -0.15
    y1: float = 0.15
    wall_height: float = 0.20
    wall_thickness: float = 0.02

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError("bin interior must have positive extent")
        if self.wall_height <= 0:
            raise ValueError("wall_height must be positive")

    @property
    def center(self) -> tuple[float, float]:
        return (self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2

    def strictly_inside(self, x, y):
        return (self.x0 < x) & (x < self.x1) & (self.y0 < y) & (y < self.y1)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def feasible(pose: Pose, width: float, gm: GripperModel, bb: BinBox) -> bool:
    pts = pose.transform(gm.sites(width))
    if np.any(pts[:, 2] < 0):
        return False
    low = pts[:, 2] < bb.wall_height
    return bool(np.all(bb.strictly_inside(pts[low, 0], pts[low, 1])))


def action_feasible(a: PrimitiveAction, spec: GridSpec, gm: GripperModel, bb: BinBox) -> bool:
    """Grasp: the grasp pose. Shift: start and end poses with closed fingers."""
    pose = pose_of(a, spec)
    if a.kind == GRASP:
        return feasible(pose, a.params.width, gm, bb)
    p = a.params
    dx, dy = p.push_dist * math.cos(p.push_dir), p.push_dist * math.sin(p.push_dir)
    return feasible(pose, 0.0, gm, bb) and feasible(pose.translated(dx, dy), 0.0, gm, bb)


def grid_for_bin(bb: BinBox, cell: float = 0.005, height_px: int = 76, width_px: int = 96) -> GridSpec:
    """Grid centered on the bin so pixel rotations about the image center are bin rotations."""
    cx, cy = bb.center
    return GridSpec.centered_on(cx, cy, cell, height_px, width_px)
