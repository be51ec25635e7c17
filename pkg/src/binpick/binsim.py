"""Deterministic 2.5D bin-picking simulator.

Objects rest flat on the bin floor as convex footprints extruded to a body
height. Grasps either capture one object or fail for a named reason; shifts
translate objects quasi-statically with wall clamping and chain pushes. Scenes
are immutable: every operation returns a new scene.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from . import geometry as geo
from .heightmap import GridSpec, Heightmap, pixel_to_world
from .primitives import (GRASP, SHIFT, BinBox, GraspParams, GripperModel, Pose, PrimitiveAction,
                         ShiftParams, action_feasible, feasible)

MAX_SPAWN_ATTEMPTS = 10_000
NEAR_WALL_BAND = 0.04
CLOSING_MARGIN = 0.002
TIP_RADIUS = 0.01
WALL_RGB = (0.5, 0.5, 0.5)

NONE = "none"
INFEASIBLE_POSE = "infeasible_pose"
MISSED = "missed"
FINGER_COLLISION = "finger_collision"
TOO_WIDE = "too_wide"
WALL_CLAMP = "wall_clamp"


class CapacityError(RuntimeError):
    """Objects could not be placed without overlap."""


@dataclass(frozen=True)
class ObjectShape:
    type_id: str
    footprint: str  # "rect" or "disc"
    dims: tuple[float, ...]  # (len_x, len_y) or (radius,)
    body_height: float
    color: tuple[float, float, float]

    def __post_init__(self):
        if self.footprint not in ("rect", "disc"):
            raise ValueError(f"unknown footprint {self.footprint!r}")
        if min(self.dims) <= 0 or self.body_height <= 0:
            raise ValueError("object dimensions must be positive")
        if self.body_height > 0.15:
            raise ValueError("body_height must not exceed 0.15 m")

    def polygon(self, x: float, y: float, yaw: float) -> np.ndarray:
        if self.footprint == "rect":
            return geo.rect_polygon(x, y, self.dims[0], self.dims[1], yaw)
        return geo.disc_polygon(x, y, self.dims[0], yaw)

    def to_dict(self) -> dict:
        return {"type_id": self.type_id, "footprint": self.footprint, "dims": list(self.dims),
                "body_height": self.body_height, "color": list(self.color)}

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectShape":
        return cls(d["type_id"], d["footprint"], tuple(d["dims"]), d["body_height"], tuple(d["color"]))


SHAPES = {
    "cube": ObjectShape("cube", "rect", (0.04, 0.04), 0.04, (0.85, 0.25, 0.2)),
    "rod": ObjectShape("rod", "rect", (0.10, 0.02), 0.02, (0.2, 0.7, 0.3)),
    "can": ObjectShape("can", "disc", (0.025,), 0.08, (0.9, 0.8, 0.2)),
    "elongated_box": ObjectShape("elongated_box", "rect", (0.12, 0.03), 0.03, (0.25, 0.4, 0.9)),
    "ball": ObjectShape("ball", "disc", (0.025,), 0.05, (0.9, 0.5, 0.1)),
    "tube": ObjectShape("tube", "disc", (0.02,), 0.10, (0.7, 0.3, 0.8)),
}
TRAIN_OBJECTS = ("cube", "rod")
UNSEEN_OBJECTS = ("can", "elongated_box", "ball", "tube")


@dataclass(frozen=True)
class SceneObject:
    shape: ObjectShape
    x: float
    y: float
    yaw: float
    id: int

    @cached_property
    def polygon(self) -> np.ndarray:
        return self.shape.polygon(self.x, self.y, self.yaw)

    def moved(self, dx: float, dy: float) -> "SceneObject":
        return replace(self, x=self.x + dx, y=self.y + dy)

    def to_dict(self) -> dict:
        return {"id": self.id, "shape": self.shape.to_dict(), "x": self.x, "y": self.y, "yaw": self.yaw}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneObject":
        return cls(ObjectShape.from_dict(d["shape"]), d["x"], d["y"], d["yaw"], d["id"])


@dataclass(frozen=True)
class BinScene:
    bin: BinBox = field(default_factory=BinBox)
    objects: tuple[SceneObject, ...] = ()
    seed: int | None = None

    def object_by_id(self, oid: int) -> SceneObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)

    def to_dict(self) -> dict:
        return {"bin": self.bin.to_dict(), "objects": [o.to_dict() for o in self.objects], "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "BinScene":
        return cls(BinBox(**d["bin"]), tuple(SceneObject.from_dict(o) for o in d["objects"]), d.get("seed"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BinScene":
        return cls.from_dict(json.loads(text))

    def rotated_pi(self) -> "BinScene":
        """The scene turned by a half turn about the bin center."""
        cx, cy = self.bin.center
        objs = tuple(replace(o, x=2 * cx - o.x, y=2 * cy - o.y, yaw=o.yaw + math.pi)
                     for o in self.objects)
        return replace(self, objects=objs)


@dataclass(frozen=True)
class StepResult:
    next_scene: BinScene
    reward: int
    success: bool
    failure_reason: str = NONE
    removed_object_id: int | None = None


def is_empty(scene: BinScene) -> bool:
    return len(scene.objects) == 0


def _interior(bb: BinBox):
    return bb.x0, bb.x1, bb.y0, bb.y1


def scene_is_valid(scene: BinScene, tol: float = 1e-8) -> bool:
    objs = scene.objects
    for o in objs:
        if not geo.inside_rect(o.polygon, *_interior(scene.bin), tol=tol):
            return False
    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            if geo.overlaps(objs[i].polygon, objs[j].polygon, tol=tol):
                return False
    return True


def _pick_shapes(rng: np.random.Generator, n: int, object_set) -> list[ObjectShape]:
    names = list(object_set)
    return [SHAPES[names[int(rng.integers(len(names)))]] for _ in range(n)]


def _place(rng, bb: BinBox, shapes, sample_xy) -> tuple[SceneObject, ...]:
    placed: list[SceneObject] = []
    attempts = 0
    for oid, shape in enumerate(shapes):
        while True:
            attempts += 1
            if attempts > MAX_SPAWN_ATTEMPTS:
                raise CapacityError(f"could not place {len(shapes)} objects in {MAX_SPAWN_ATTEMPTS} attempts")
            x, y = sample_xy(rng)
            yaw = float(rng.uniform(-math.pi, math.pi))
            cand = SceneObject(shape, x, y, yaw, oid)
            if not geo.inside_rect(cand.polygon, *_interior(bb), tol=0.0):
                continue
            if any(geo.overlaps(cand.polygon, o.polygon) for o in placed):
                continue
            placed.append(cand)
            break
    return tuple(placed)


def spawn_random(n: int, object_set=TRAIN_OBJECTS, seed: int = 0, bb: BinBox | None = None) -> BinScene:
    if not 1 <= n <= 6:
        raise ValueError(f"object count must be in [1, 6], got {n}")
    bb = bb or BinBox()
    rng = np.random.default_rng(seed)
    shapes = _pick_shapes(rng, n, object_set)

    def sample_xy(r):
        return float(r.uniform(bb.x0, bb.x1)), float(r.uniform(bb.y0, bb.y1))

    return BinScene(bb, _place(rng, bb, shapes, sample_xy), seed)


def spawn_near_wall(n: int, object_set=TRAIN_OBJECTS, seed: int = 0, bb: BinBox | None = None,
                    band: float = NEAR_WALL_BAND) -> BinScene:
    """Like :func:`spawn_random` but centroids lie within ``band`` of an interior wall face."""
    if not 1 <= n <= 6:
        raise ValueError(f"object count must be in [1, 6], got {n}")
    bb = bb or BinBox()
    rng = np.random.default_rng(seed)
    shapes = _pick_shapes(rng, n, object_set)
    lx, ly = bb.x1 - bb.x0, bb.y1 - bb.y0

    def sample_xy(r):
        # walls weighted by length so the band is sampled uniformly by area
        u = float(r.uniform(0, 2 * (lx + ly)))
        d = float(r.uniform(0, band))
        if u < lx:
            return bb.x0 + u, bb.y0 + d
        if u < 2 * lx:
            return bb.x0 + (u - lx), bb.y1 - d
        u -= 2 * lx
        if u < ly:
            return bb.x0 + d, bb.y0 + u
        return bb.x1 - d, bb.y0 + (u - ly)

    return BinScene(bb, _place(rng, bb, shapes, sample_xy), seed)


def spawn_wall_tucked(seed: int = 0, object_type: str = "rod", gap: tuple[float, float] = (0.002, 0.0035),
                      bb: BinBox | None = None, end_margin: float = 0.05) -> BinScene:
    """One object laid parallel to a random wall, leaving only a few millimeters of gap.

    No grasp of the default rod succeeds from this position: the wall-side finger
    has no room. Moving the rod a few centimeters away from the wall frees it.
    """
    bb = bb or BinBox()
    rng = np.random.default_rng(seed)
    shape = SHAPES[object_type]
    wall = int(rng.integers(4))
    g = float(rng.uniform(*gap))
    length, thick = max(shape.dims), min(shape.dims)
    along_x = wall in (0, 1)
    yaw = 0.0 if (shape.dims[0] >= shape.dims[1]) == along_x else math.pi / 2
    lo, hi = (bb.x0, bb.x1) if along_x else (bb.y0, bb.y1)
    t = float(rng.uniform(lo + end_margin + length / 2, hi - end_margin - length / 2))
    off = g + thick / 2
    if wall == 0:
        x, y = t, bb.y0 + off
    elif wall == 1:
        x, y = t, bb.y1 - off
    elif wall == 2:
        x, y = bb.x0 + off, t
    else:
        x, y = bb.x1 - off, t
    return BinScene(bb, (SceneObject(shape, x, y, yaw, 0),), seed)


def render(scene: BinScene, spec: GridSpec) -> Heightmap:
    bb = scene.bin
    rows, cols = np.meshgrid(np.arange(spec.height_px), np.arange(spec.width_px), indexing="ij")
    xs = spec.origin_x + (cols + 0.5) * spec.cell
    ys = spec.origin_y + (rows + 0.5) * spec.cell
    t = bb.wall_thickness
    outer = (xs >= bb.x0 - t) & (xs <= bb.x1 + t) & (ys >= bb.y0 - t) & (ys <= bb.y1 + t)
    inner = (xs > bb.x0) & (xs < bb.x1) & (ys > bb.y0) & (ys < bb.y1)
    wall = outer & ~inner
    z = np.where(wall, bb.wall_height, 0.0)
    rgb = np.zeros((*spec.shape, 3))
    rgb[wall] = WALL_RGB
    for o in sorted(scene.objects, key=lambda o: o.id):
        inside = geo.contains_points(o.polygon, xs, ys) & inner
        z[inside] = o.shape.body_height
        rgb[inside] = o.shape.color
    return Heightmap(spec, rgb, z)


def finger_polygons(x: float, y: float, yaw: float, width: float, gm: GripperModel):
    u = np.array([math.cos(yaw), math.sin(yaw)])
    return [geo.rect_polygon(x + sgn * width / 2 * u[0], y + sgn * width / 2 * u[1],
                             gm.finger_thickness, gm.finger_breadth, yaw) for sgn in (1.0, -1.0)]


def execute_grasp(scene: BinScene, g: GraspParams, z: float, spec: GridSpec,
                  gm: GripperModel | None = None) -> StepResult:
    gm = gm or GripperModel()
    bb = scene.bin
    x, y = pixel_to_world(spec, g.row, g.col)
    pose = Pose((x, y, z), 0.0, g.pitch, g.yaw)
    if not feasible(pose, g.width, gm, bb):
        return StepResult(scene, 0, False, INFEASIBLE_POSE)
    cand = next((o for o in sorted(scene.objects, key=lambda o: o.id)
                 if geo.contains_point(o.polygon, x, y)), None)
    if cand is None:
        return StepResult(scene, 0, False, MISSED)
    u = (math.cos(g.yaw), math.sin(g.yaw))
    lo, hi = geo.extent_along(cand.polygon, (x, y), u)
    half_gap = (g.width - CLOSING_MARGIN) / 2
    if lo < -half_gap or hi > half_gap:
        return StepResult(scene, 0, False, TOO_WIDE)
    for finger in finger_polygons(x, y, g.yaw, g.width, gm):
        if not geo.inside_rect(finger, *_interior(bb)):
            return StepResult(scene, 0, False, FINGER_COLLISION)
        for o in scene.objects:
            if o.id != cand.id and o.shape.body_height > z and geo.overlaps(finger, o.polygon):
                return StepResult(scene, 0, False, FINGER_COLLISION)
    if z >= cand.shape.body_height:
        return StepResult(scene, 0, False, MISSED)
    rest = tuple(o for o in scene.objects if o.id != cand.id)
    return StepResult(replace(scene, objects=rest), 1, True, NONE, cand.id)


class _Pusher:
    """Mutable working copy of object positions during one shift."""

    def __init__(self, scene: BinScene):
        self.bin = scene.bin
        self.objs = {o.id: o for o in scene.objects}
        self.clamped = False

    def _others(self, oid):
        return [o for k, o in sorted(self.objs.items()) if k != oid]

    def push(self, oid: int, vec: np.ndarray, chain: frozenset = frozenset()) -> None:
        if float(np.hypot(*vec)) < 1e-12:
            return
        obj = self.objs[oid]
        t_wall = geo.max_travel_in_rect(obj.polygon, vec, *_interior(self.bin))
        if len(chain) < len(self.objs):
            hits = []
            for other in self._others(oid):
                if other.id in chain:
                    continue
                t = geo.swept_contact(obj.polygon, vec, other.polygon)
                if t is not None:
                    hits.append((t, other.id))
            if hits:
                t_hit, hid = min(hits)
                if t_hit < t_wall:
                    self.push(hid, (1.0 - t_hit) * vec, chain | {oid})
        t_move = t_wall
        for other in self._others(oid):
            t = geo.swept_contact(obj.polygon, vec, other.polygon)
            if t is not None:
                t_move = min(t_move, t)
        if t_move < 1.0 and t_wall == t_move:
            self.clamped = True
        if t_move > 0:
            self.objs[oid] = obj.moved(float(t_move * vec[0]), float(t_move * vec[1]))


def execute_shift(scene: BinScene, s: ShiftParams, z: float, spec: GridSpec,
                  gm: GripperModel | None = None) -> StepResult:
    gm = gm or GripperModel()
    x, y = pixel_to_world(spec, s.row, s.col)
    push = s.push_dist * np.array([math.cos(s.push_dir), math.sin(s.push_dir)])
    if not action_feasible(PrimitiveAction(SHIFT, s, z), spec, gm, scene.bin):
        return StepResult(scene, 0, False, INFEASIBLE_POSE)
    tip = geo.disc_polygon(x, y, TIP_RADIUS)

    def tip_contact(o: SceneObject):
        if o.shape.body_height <= z:
            return None
        return geo.swept_contact(tip, push, o.polygon)

    order = sorted((t, o.id) for o in scene.objects if (t := tip_contact(o)) is not None)
    pusher = _Pusher(scene)
    for _, oid in order:
        t = tip_contact(pusher.objs[oid])
        if t is None:
            continue
        pusher.push(oid, (1.0 - t) * push)
    objs = tuple(pusher.objs[o.id] for o in scene.objects)
    reason = WALL_CLAMP if pusher.clamped else NONE
    return StepResult(replace(scene, objects=objs), 0, False, reason)


def step(scene: BinScene, a: PrimitiveAction, spec: GridSpec, gm: GripperModel | None = None) -> StepResult:
    if a.kind == GRASP:
        return execute_grasp(scene, a.params, a.z, spec, gm)
    if a.kind == SHIFT:
        return execute_shift(scene, a.params, a.z, spec, gm)
    raise ValueError(f"unknown primitive kind {a.kind!r}")
