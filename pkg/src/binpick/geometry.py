"""Planar convex-polygon helpers used by the bin simulator.

Polygons are ``(N, 2)`` float arrays with counter-clockwise vertices. Discs are
represented by circumscribing regular polygons so that every footprint goes
through the same separating-axis machinery.
"""

from __future__ import annotations

import math

import numpy as np

EPS = 1e-9
OVERLAP_TOL = 1e-8
DISC_SIDES = 32


def rect_polygon(cx: float, cy: float, len_x: float, len_y: float, yaw: float) -> np.ndarray:
    hx, hy = len_x / 2, len_y / 2
    local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def disc_polygon(cx: float, cy: float, radius: float, yaw: float = 0.0,
                 sides: int = DISC_SIDES) -> np.ndarray:
    # circumscribed, so the true disc lies inside the polygon
    r = radius / math.cos(math.pi / sides)
    ang = yaw + (np.arange(sides) + 0.5) * (2 * math.pi / sides)
    return np.column_stack([cx + r * np.cos(ang), cy + r * np.sin(ang)])


def edge_normals(poly: np.ndarray) -> np.ndarray:
    edges = np.roll(poly, -1, axis=0) - poly
    normals = np.column_stack([edges[:, 1], -edges[:, 0]])
    return normals / np.linalg.norm(normals, axis=1, keepdims=True)


def project(poly: np.ndarray, axis: np.ndarray) -> tuple[float, float]:
    d = poly @ axis
    return float(d.min()), float(d.max())


def contains_point(poly: np.ndarray, x: float, y: float) -> bool:
    """Closed containment test for a counter-clockwise convex polygon."""
    p = np.array([x, y])
    edges = np.roll(poly, -1, axis=0) - poly
    rel = p - poly
    cross = edges[:, 0] * rel[:, 1] - edges[:, 1] * rel[:, 0]
    return bool(np.all(cross >= -EPS))


def contains_points(poly: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    inside = np.ones(xs.shape, dtype=bool)
    n = len(poly)
    for i in range(n):
        ax, ay = poly[i]
        bx, by = poly[(i + 1) % n]
        inside &= (bx - ax) * (ys - ay) - (by - ay) * (xs - ax) >= -EPS
    return inside


def overlaps(a: np.ndarray, b: np.ndarray, tol: float = OVERLAP_TOL) -> bool:
    """True when the polygons penetrate by more than ``tol``; touching is allowed."""
    for axis in np.vstack([edge_normals(a), edge_normals(b)]):
        amin, amax = project(a, axis)
        bmin, bmax = project(b, axis)
        if amax <= bmin + tol or bmax <= amin + tol:
            return False
    return True


def inside_rect(poly: np.ndarray, x0: float, x1: float, y0: float, y1: float,
                tol: float = EPS) -> bool:
    return bool(poly[:, 0].min() >= x0 - tol and poly[:, 0].max() <= x1 + tol
                and poly[:, 1].min() >= y0 - tol and poly[:, 1].max() <= y1 + tol)


def swept_contact(moving: np.ndarray, v: np.ndarray, static: np.ndarray) -> float | None:
    """Earliest ``t`` in [0, 1] at which ``moving + t*v`` penetrates ``static``.

    Returns ``None`` if the polygons never penetrate along the sweep. If they
    already penetrate at ``t=0`` the result is 0.
    """
    t_enter, t_exit = 0.0, 1.0
    for axis in np.vstack([edge_normals(moving), edge_normals(static)]):
        amin, amax = project(moving, axis)
        bmin, bmax = project(static, axis)
        speed = float(v @ axis)
        # overlap on this axis: amax + t*speed > bmin + EPS and amin + t*speed < bmax - EPS
        lo_gap = bmin + EPS - amax
        hi_gap = bmax - EPS - amin
        if abs(speed) < 1e-15:
            if lo_gap >= 0 or hi_gap <= 0:
                return None
            continue
        t0, t1 = lo_gap / speed, hi_gap / speed
        if t0 > t1:
            t0, t1 = t1, t0
        t_enter = max(t_enter, t0)
        t_exit = min(t_exit, t1)
        if t_enter >= t_exit:
            return None
    return t_enter


def max_travel_in_rect(poly: np.ndarray, v: np.ndarray, x0: float, x1: float,
                       y0: float, y1: float) -> float:
    """Largest ``t`` in [0, 1] keeping ``poly + t*v`` inside the rectangle."""
    t = 1.0
    if v[0] > 0:
        t = min(t, (x1 - poly[:, 0].max()) / v[0])
    elif v[0] < 0:
        t = min(t, (x0 - poly[:, 0].min()) / v[0])
    if v[1] > 0:
        t = min(t, (y1 - poly[:, 1].max()) / v[1])
    elif v[1] < 0:
        t = min(t, (y0 - poly[:, 1].min()) / v[1])
    return max(t, 0.0)


def extent_along(poly: np.ndarray, origin, axis) -> tuple[float, float]:
    """Projection interval of ``poly`` onto unit ``axis`` relative to ``origin``."""
    d = (poly - np.asarray(origin)) @ np.asarray(axis)
    return float(d.min()), float(d.max())
