"""Pinhole camera model.

Camera frame: x right, y down, z forward (meters). Pixels are continuous.

KITTI ``P2`` matrices carry a small translation column (the offset between
the rectified reference camera and camera 2). It is kept here as
``offset``, added to camera-frame points before the pure pinhole
projection, so ``project`` reproduces ``P2 @ [X, 1]`` exactly while the
lifting formulas keep their pure-pinhole form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from kplift.errors import NonPositiveDepth


class Point3(NamedTuple):
    x: float
    y: float
    z: float


class Pixel(NamedTuple):
    u: float
    v: float


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    p_x: float
    p_y: float
    image_w: float
    image_h: float
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if not self.f > 0:
            raise ValueError(f"focal length must be positive, got {self.f}")
        if not (self.image_w > 0 and self.image_h > 0):
            raise ValueError("image size must be positive")
        if not (0 <= self.p_x <= self.image_w and 0 <= self.p_y <= self.image_h):
            raise ValueError("principal point lies outside the image")
        object.__setattr__(self, "offset", tuple(float(t) for t in self.offset))

    @classmethod
    def from_p2(cls, p2, image_w: float, image_h: float) -> "CameraIntrinsics":
        """Build intrinsics from a 3x4 KITTI projection matrix.

        The translation column is decomposed exactly:
        ``t_z = P[2,3]``, ``t_x = (P[0,3] - p_x t_z) / f``, ``t_y = (P[1,3] - p_y t_z) / f``.
        """
        p = np.asarray(p2, dtype=float).reshape(3, 4)
        f, px, py = p[0, 0], p[0, 2], p[1, 2]
        tz = p[2, 3]
        tx = (p[0, 3] - px * tz) / f
        ty = (p[1, 3] - py * tz) / f
        return cls(float(f), float(px), float(py), image_w, image_h, (tx, ty, tz))

    def p2(self) -> np.ndarray:
        """The 3x4 projection matrix equivalent to these intrinsics."""
        tx, ty, tz = self.offset
        f, px, py = self.f, self.p_x, self.p_y
        return np.array(
            [
                [f, 0.0, px, f * tx + px * tz],
                [0.0, f, py, f * ty + py * tz],
                [0.0, 0.0, 1.0, tz],
            ]
        )


def project(intr: CameraIntrinsics, p) -> Pixel:
    x, y, z = (float(c) for c in p)
    tx, ty, tz = intr.offset
    zs = z + tz
    if not (z > 0 and zs > 0):
        raise NonPositiveDepth(f"cannot project point with depth {z}")
    return Pixel(intr.f * (x + tx) / zs + intr.p_x, intr.f * (y + ty) / zs + intr.p_y)


def backproject(intr: CameraIntrinsics, px, z: float) -> Point3:
    """Camera-frame point on the ray through ``px`` at depth ``z``."""
    u, v = (float(c) for c in px)
    tx, ty, tz = intr.offset
    zs = z + tz
    if not (z > 0 and zs > 0):
        raise NonPositiveDepth(f"cannot back-project at depth {z}")
    return Point3(zs * (u - intr.p_x) / intr.f - tx, zs * (v - intr.p_y) / intr.f - ty, float(z))


def in_frustum(intr: CameraIntrinsics, p) -> bool:
    try:
        u, v = project(intr, p)
    except NonPositiveDepth:
        return False
    return 0.0 <= u <= intr.image_w and 0.0 <= v <= intr.image_h


def project_points(intr: CameraIntrinsics, pts: np.ndarray) -> np.ndarray:
    """Vectorised ``project`` over an (N, 3) array; returns (N, 2)."""
    q = np.asarray(pts, dtype=float) + np.asarray(intr.offset)
    if q.size and (np.any(q[:, 2] <= 0) or np.any(np.asarray(pts)[:, 2] <= 0)):
        raise NonPositiveDepth("point at or behind the camera plane")
    uv = np.empty((q.shape[0], 2))
    uv[:, 0] = intr.f * q[:, 0] / q[:, 2] + intr.p_x
    uv[:, 1] = intr.f * q[:, 1] / q[:, 2] + intr.p_y
    return uv


def rot_y(theta: float) -> np.ndarray:
    """Yaw rotation about the camera's vertical (y) axis."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def wrap_angle(a: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    a = float(a)
    if -math.pi <= a < math.pi:
        return a
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w < 0:
        w += 2.0 * math.pi
    w -= math.pi
    # fmod rounding can land exactly on +pi
    return -math.pi if w >= math.pi else w
