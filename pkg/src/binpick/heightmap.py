"""Four-channel (RGB + Z) heightmaps of the bin area.

A heightmap is a top-down orthographic image. Column index grows with world x,
row index grows with world y, and pixel (0, 0) has its lower corner at the grid
origin.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass

import numpy as np

Z_MAX = 0.30
DEFAULT_CHANGE_THRESHOLD = 0.01


@dataclass(frozen=True)
class GridSpec:
    origin_x: float = 0.0
    origin_y: float = 0.0
    cell: float = 0.005
    height_px: int = 76
    width_px: int = 96

    def __post_init__(self):
        if not self.cell > 0:
            raise ValueError(f"cell must be positive, got {self.cell}")
        if self.height_px <= 0 or self.width_px <= 0:
            raise ValueError("grid dimensions must be positive")
        if self.height_px % 4 or self.width_px % 4:
            raise ValueError(
                f"grid dimensions must be divisible by 4, got {self.height_px}x{self.width_px}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.height_px, self.width_px

    @property
    def extent(self) -> tuple[float, float]:
        """World size (x, y) covered by the grid."""
        return self.width_px * self.cell, self.height_px * self.cell

    @property
    def center(self) -> tuple[float, float]:
        ex, ey = self.extent
        return self.origin_x + ex / 2, self.origin_y + ey / 2

    @classmethod
    def centered_on(cls, cx: float, cy: float, cell: float = 0.005,
                    height_px: int = 76, width_px: int = 96) -> "GridSpec":
        return cls(origin_x=cx - width_px * cell / 2, origin_y=cy - height_px * cell / 2,
                   cell=cell, height_px=height_px, width_px=width_px)

    def to_dict(self) -> dict:
        return {"origin_x": self.origin_x, "origin_y": self.origin_y, "cell": self.cell,
                "height_px": self.height_px, "width_px": self.width_px}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(**{k: d[k] for k in ("origin_x", "origin_y", "cell", "height_px", "width_px")})


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class Heightmap:
    """Immutable RGB + Z image on a :class:`GridSpec`.

    ``rgb`` is ``(H, W, 3)`` float32 in [0, 1]; ``z`` is ``(H, W)`` float32 in
    meters, clamped to [0, Z_MAX].
    """

    __slots__ = ("spec", "rgb", "z")

    def __init__(self, spec: GridSpec, rgb, z):
        rgb = np.asarray(rgb, dtype=np.float32)
        z = np.asarray(z, dtype=np.float32)
        if rgb.shape != (spec.height_px, spec.width_px, 3):
            raise ValueError(f"rgb shape {rgb.shape} does not match grid {spec.shape}")
        if z.shape != spec.shape:
            raise ValueError(f"z shape {z.shape} does not match grid {spec.shape}")
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(rgb))):
            raise ValueError("heightmap values must be finite")
        object.__setattr__(self, "spec", spec)
        object.__setattr__(self, "rgb", _frozen(np.clip(rgb, 0.0, 1.0)))
        object.__setattr__(self, "z", _frozen(np.clip(z, 0.0, Z_MAX)))

    def __setattr__(self, name, value):
        raise AttributeError("Heightmap is immutable")

    @classmethod
    def empty(cls, spec: GridSpec) -> "Heightmap":
        return cls(spec, np.zeros((*spec.shape, 3)), np.zeros(spec.shape))

    def __eq__(self, other):
        if not isinstance(other, Heightmap):
            return NotImplemented
        return (self.spec == other.spec and np.array_equal(self.rgb, other.rgb)
                and np.array_equal(self.z, other.z))

    def __repr__(self):
        return f"Heightmap({self.spec.height_px}x{self.spec.width_px}, zmax={float(self.z.max()):.3f})"

    def to_network_input(self) -> np.ndarray:
        """(4, H, W) float32 array: RGB then Z scaled by 1/Z_MAX."""
        return np.concatenate([self.rgb.transpose(2, 0, 1), (self.z / Z_MAX)[None]], axis=0)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        np.savez(buf, spec=np.frombuffer(json.dumps(self.spec.to_dict()).encode(), dtype=np.uint8),
                 rgb=self.rgb.astype("<f4"), z=self.z.astype("<f4"))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Heightmap":
        with np.load(io.BytesIO(data)) as f:
            spec = GridSpec.from_dict(json.loads(f["spec"].tobytes().decode()))
            return cls(spec, f["rgb"], f["z"])

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Heightmap":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass(frozen=True, eq=False)
class PixelMask:
    spec: GridSpec
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.shape != self.spec.shape:
            raise ValueError(f"mask shape {bits.shape} does not match grid {self.spec.shape}")
        object.__setattr__(self, "bits", _frozen(bits))

    def __eq__(self, other):
        return isinstance(other, PixelMask) and self.spec == other.spec and np.array_equal(self.bits, other.bits)

    def count(self) -> int:
        return int(self.bits.sum())

    def pixels(self) -> np.ndarray:
        """(N, 2) array of set (row, col) pairs in row-major order."""
        return np.argwhere(self.bits)


def project_pointcloud(points, spec: GridSpec) -> Heightmap:
    """Orthographic top-down projection of colored points ``(x, y, z, r, g, b)``.

    Each cell keeps the highest point that falls in it and that point's color.
    Points outside the grid extent are dropped.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 6)
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite values")
    z = np.zeros(spec.shape, dtype=np.float32)
    rgb = np.zeros((*spec.shape, 3), dtype=np.float32)
    if len(pts) == 0:
        return Heightmap(spec, rgb, z)
    col = np.floor((pts[:, 0] - spec.origin_x) / spec.cell).astype(np.int64)
    row = np.floor((pts[:, 1] - spec.origin_y) / spec.cell).astype(np.int64)
    keep = (col >= 0) & (col < spec.width_px) & (row >= 0) & (row < spec.height_px)
    pts, row, col = pts[keep], row[keep], col[keep]
    # z-buffer: write in ascending z so the topmost point of each cell lands last
    order = np.argsort(pts[:, 2], kind="stable")
    pts, row, col = pts[order], row[order], col[order]
    z[row, col] = pts[:, 2]
    rgb[row, col] = pts[:, 3:6]
    return Heightmap(spec, rgb, z)


def heightmap_to_pointcloud(hm: Heightmap) -> np.ndarray:
    """One ``(x, y, z, r, g, b)`` point per cell center."""
    rows, cols = np.meshgrid(np.arange(hm.spec.height_px), np.arange(hm.spec.width_px), indexing="ij")
    x = hm.spec.origin_x + (cols + 0.5) * hm.spec.cell
    y = hm.spec.origin_y + (rows + 0.5) * hm.spec.cell
    return np.column_stack([x.ravel(), y.ravel(), hm.z.ravel(), hm.rgb.reshape(-1, 3)])


def world_to_pixel(spec: GridSpec, x: float, y: float) -> tuple[int, int]:
    ex, ey = spec.extent
    if not (spec.origin_x <= x < spec.origin_x + ex and spec.origin_y <= y < spec.origin_y + ey):
        raise IndexError(f"world point ({x:.4f}, {y:.4f}) outside the grid extent")
    col = min(int(math.floor((x - spec.origin_x) / spec.cell)), spec.width_px - 1)
    row = min(int(math.floor((y - spec.origin_y) / spec.cell)), spec.height_px - 1)
    return row, col


def pixel_to_world(spec: GridSpec, row: int, col: int) -> tuple[float, float]:
    if not (0 <= row < spec.height_px and 0 <= col < spec.width_px):
        raise IndexError(f"pixel ({row}, {col}) outside the {spec.height_px}x{spec.width_px} grid")
    return spec.origin_x + (col + 0.5) * spec.cell, spec.origin_y + (row + 0.5) * spec.cell


def rotation_source_index(spec: GridSpec, angle: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest-neighbor source pixel of every output pixel when rotating by ``angle``.

    Returns ``(src_row, src_col, valid)``. The rotation is counter-clockwise in
    the world x-y frame, about the image center.
    """
    h, w = spec.shape
    cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    c, s = math.cos(angle), math.sin(angle)
    dx, dy = cols - cc, rows - cr
    # inverse map: rotate output offsets by -angle
    src_c = np.floor(c * dx + s * dy + cc + 0.5).astype(np.int64)
    src_r = np.floor(-s * dx + c * dy + cr + 0.5).astype(np.int64)
    valid = (src_r >= 0) & (src_r < h) & (src_c >= 0) & (src_c < w)
    return src_r, src_c, valid


def rotate_heightmap(hm: Heightmap, angle: float) -> Heightmap:
    src_r, src_c, valid = rotation_source_index(hm.spec, angle)
    z = np.zeros_like(hm.z)
    rgb = np.zeros_like(hm.rgb)
    z[valid] = hm.z[src_r[valid], src_c[valid]]
    rgb[valid] = hm.rgb[src_r[valid], src_c[valid]]
    return Heightmap(hm.spec, rgb, z)


def rotate_pixel(spec: GridSpec, row: int, col: int, angle: float) -> tuple[int, int]:
    """Forward map of a pixel under :func:`rotate_heightmap`, rounded to the nearest pixel.

    The result may fall outside the frame; callers check.
    """
    cr, cc = (spec.height_px - 1) / 2.0, (spec.width_px - 1) / 2.0
    c, s = math.cos(angle), math.sin(angle)
    dx, dy = col - cc, row - cr
    return int(math.floor(s * dx + c * dy + cr + 0.5)), int(math.floor(c * dx - s * dy + cc + 0.5))


def change_mask(current: Heightmap, reference: Heightmap,
                threshold: float = DEFAULT_CHANGE_THRESHOLD) -> PixelMask:
    if current.spec != reference.spec:
        raise ValueError("heightmaps are on different grids")
    diff = np.abs(current.z.astype(np.float64) - reference.z.astype(np.float64))
    return PixelMask(current.spec, diff > threshold)


def to_png_panels(hm: Heightmap) -> tuple[np.ndarray, np.ndarray]:
    """8-bit RGB panel and grayscale Z panel (scaled by 1/Z_MAX)."""
    rgb = np.round(hm.rgb * 255).astype(np.uint8)
    zimg = np.round(np.clip(hm.z / Z_MAX, 0, 1) * 255).astype(np.uint8)
    return rgb, zimg
