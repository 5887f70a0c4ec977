"""Overlap of yaw-rotated 3D boxes.

Footprints live in the ground (x, z) plane. Vertical extents use the camera
frame directly: ``center_y +- h/2`` with y pointing down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from kplift.camera import Point3

CLIP_EPS = 1e-9
# intersections thinner than this (m^2) are face contacts, not overlap
MIN_AREA = 1e-12

Vertex = tuple[float, float]


@dataclass(frozen=True)
class Box3D:
    center: Point3
    yaw: float
    dims: tuple[float, float, float]  # (w, h, l)

    def __post_init__(self) -> None:
        object.__setattr__(self, "center", Point3(*(float(c) for c in self.center)))
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))
        if not all(d > 0 for d in self.dims):
            raise ValueError(f"box dims must be positive, got {self.dims}")

    @property
    def volume(self) -> float:
        w, h, l = self.dims
        return w * h * l


def polygon_area(poly: Sequence[Vertex]) -> float:
    """Signed shoelace area; positive for counter-clockwise vertices."""
    n = len(poly)
    if n < 3:
        return 0.0
    s = 0.0
    for i in range(n):
        x0, z0 = poly[i]
        x1, z1 = poly[(i + 1) % n]
        s += x0 * z1 - x1 * z0
    return 0.5 * s


def bev_footprint(b: Box3D) -> list[Vertex]:
    """Counter-clockwise ground rectangle of ``b`` in (x, z)."""
    w, _, l = b.dims
    c, s = math.cos(b.yaw), math.sin(b.yaw)
    cx, cz = b.center.x, b.center.z
    # R_y maps the length axis to (c, -s) and the width axis to (s, c) in (x, z)
    corners = []
    for a, bw in ((1, 1), (-1, 1), (-1, -1), (1, -1)):
        dl, dw = a * l / 2.0, bw * w / 2.0
        corners.append((cx + c * dl + s * dw, cz - s * dl + c * dw))
    if polygon_area(corners) < 0:
        corners.reverse()
    return corners


def _side(a: Vertex, b: Vertex, p: Vertex) -> float:
    return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])


def _edge_hit(p: Vertex, q: Vertex, a: Vertex, b: Vertex) -> Vertex:
    sp, sq = _side(a, b, p), _side(a, b, q)
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def convex_intersect(subject: Sequence[Vertex], clip: Sequence[Vertex]) -> list[Vertex]:
    """Sutherland-Hodgman clip of one convex CCW polygon by another."""
    out = list(subject)
    if len(out) < 3 or len(clip) < 3:
        return []
    n = len(clip)
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]
        # scale tolerance by edge length so it acts as a distance
        tol = CLIP_EPS * math.hypot(b[0] - a[0], b[1] - a[1])
        inp, out = out, []
        if not inp:
            break
        prev = inp[-1]
        prev_in = _side(a, b, prev) >= -tol
        for cur in inp:
            cur_in = _side(a, b, cur) >= -tol
            if cur_in:
                if not prev_in:
                    out.append(_edge_hit(prev, cur, a, b))
                out.append(cur)
            elif prev_in:
                out.append(_edge_hit(prev, cur, a, b))
            prev, prev_in = cur, cur_in
    if len(out) < 3 or polygon_area(out) <= MIN_AREA:
        return []
    return out


def _canonical(a: Box3D, b: Box3D) -> tuple[Box3D, Box3D]:
    ka = (tuple(a.center), a.yaw, a.dims)
    kb = (tuple(b.center), b.yaw, b.dims)
    return (a, b) if ka <= kb else (b, a)


def intersection_volume(a: Box3D, b: Box3D) -> float:
    a, b = _canonical(a, b)
    ha, hb = a.dims[1] / 2.0, b.dims[1] / 2.0
    overlap_y = min(a.center.y + ha, b.center.y + hb) - max(a.center.y - ha, b.center.y - hb)
    if overlap_y <= 0:
        return 0.0
    area = polygon_area(convex_intersect(bev_footprint(a), bev_footprint(b)))
    return max(area, 0.0) * overlap_y


def iou3d(a: Box3D, b: Box3D) -> float:
    inter = intersection_volume(a, b)
    if inter <= 0:
        return 0.0
    union = a.volume + b.volume - inter
    return min(1.0, max(0.0, inter / union))


def iou_bev(a: Box3D, b: Box3D) -> float:
    a, b = _canonical(a, b)
    inter = max(polygon_area(convex_intersect(bev_footprint(a), bev_footprint(b))), 0.0)
    if inter <= 0:
        return 0.0
    union = a.dims[0] * a.dims[2] + b.dims[0] * b.dims[2] - inter
    return min(1.0, inter / union)


def iou2d(a: Sequence[float], b: Sequence[float]) -> float:
    """Axis-aligned IoU of (xmin, ymin, xmax, ymax) rectangles."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def box_corners(center, yaw: float, dims: Sequence[float]) -> np.ndarray:
    """(8, 3) corners; bit 0 of the index selects +l, bit 1 +h, bit 2 +w."""
    w, h, l = dims
    local = np.array(
        [[(l if i & 1 else -l) / 2.0, (h if i & 2 else -h) / 2.0, (w if i & 4 else -w) / 2.0] for i in range(8)]
    )
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return local @ rot.T + np.asarray(center, dtype=float)
