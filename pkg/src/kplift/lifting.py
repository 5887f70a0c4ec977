"""Lift 2D keypoint detections to 3D poses.

Pipeline for one detection: decode dimensions from class-mean log offsets,
recover the depth of a vertical windshield pair from its pixel span, lift
the pair's bottom keypoint, compose global yaw from the binned local angle
and the keypoint's ray angle, then step from the keypoint to the box center
through the template's signed offset ratios.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from kplift.camera import CameraIntrinsics, Point3, backproject, rot_y, wrap_angle
from kplift.errors import DegenerateDistribution, DegeneratePair, NoVisiblePair
from kplift.templates import (
    DEPTH_PAIRS,
    N_CLASSES,
    N_KEYPOINTS,
    DepthPair,
    KeypointTemplate,
    center_offset_ratios,
    pair_height_ratio,
)

N_BINS = 72
BIN_WIDTH = 2.0 * math.pi / N_BINS
BIN_MEDIANS = (np.arange(N_BINS) + 0.5) * BIN_WIDTH
MIN_PAIR_SPAN_PX = 1e-6


@dataclass(frozen=True, eq=False)
class Detection2D:
    box2d: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    keypoints: np.ndarray  # (14, 2) pixels
    visible: np.ndarray  # (14,) bool
    orient_bins: np.ndarray  # (72,)
    dim_offsets: tuple[float, float, float]  # log-space (dw, dh, dl)
    class_probs: np.ndarray  # (5,)
    score: float = 1.0

    def __post_init__(self) -> None:
        x0, y0, x1, y1 = (float(c) for c in self.box2d)
        if not (x0 < x1 and y0 < y1):
            raise ValueError(f"malformed 2D box {self.box2d}")
        object.__setattr__(self, "box2d", (x0, y0, x1, y1))
        kp = np.array(self.keypoints, dtype=float).reshape(N_KEYPOINTS, 2)
        vis = np.array(self.visible, dtype=bool).reshape(N_KEYPOINTS)
        bins = np.array(self.orient_bins, dtype=float).reshape(N_BINS)
        probs = np.array(self.class_probs, dtype=float).reshape(N_CLASSES)
        _check_distribution(bins, "orient_bins")
        _check_distribution(probs, "class_probs")
        for a in (kp, vis, bins, probs):
            a.setflags(write=False)
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "visible", vis)
        object.__setattr__(self, "orient_bins", bins)
        object.__setattr__(self, "class_probs", probs)
        object.__setattr__(self, "dim_offsets", tuple(float(d) for d in self.dim_offsets))
        if not 0.0 <= float(self.score) <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        object.__setattr__(self, "score", float(self.score))

    @property
    def class_id(self) -> int:
        return int(np.argmax(self.class_probs))


def _check_distribution(p: np.ndarray, name: str) -> None:
    if np.any(p < 0) or not np.all(np.isfinite(p)) or abs(float(p.sum()) - 1.0) > 1e-6:
        raise ValueError(f"{name} is not a probability distribution")


@dataclass(frozen=True)
class Pose3D:
    center: Point3
    yaw: float
    dims: tuple[float, float, float]  # (w, h, l)
    class_id: int
    score: float

    def __post_init__(self) -> None:
        if self.score is None:
            raise ValueError("Pose3D requires a score")
        object.__setattr__(self, "center", Point3(*(float(c) for c in self.center)))
        object.__setattr__(self, "dims", tuple(float(d) for d in self.dims))
        if not all(d > 0 for d in self.dims):
            raise ValueError(f"dims must be positive, got {self.dims}")
        if not self.center.z > 0:
            raise ValueError("pose center must lie in front of the camera")
        if not -math.pi <= self.yaw < math.pi:
            raise ValueError(f"yaw {self.yaw} outside [-pi, pi)")


def decode_dims(det: Detection2D, tpl: KeypointTemplate) -> tuple[float, float, float]:
    return tuple(mu * math.exp(d) for mu, d in zip(tpl.mean_dims, det.dim_offsets))


def encode_dims(dims: Sequence[float], tpl: KeypointTemplate) -> tuple[float, float, float]:
    return tuple(math.log(d / mu) for d, mu in zip(dims, tpl.mean_dims))


def select_depth_pair(keypoints: np.ndarray, visible: np.ndarray) -> DepthPair:
    """The fully visible depth pair with the largest vertical pixel span."""
    best, best_span = None, -1.0
    for pair in DEPTH_PAIRS:
        if not (visible[pair.top] and visible[pair.bottom]):
            continue
        span = abs(float(keypoints[pair.top][1] - keypoints[pair.bottom][1]))
        if span > best_span:
            best, best_span = pair, span
    if best is None:
        raise NoVisiblePair("no depth pair has both keypoints visible")
    return best


def depth_from_span(f: float, ratio: float, height_m: float, span_px: float) -> float:
    """Pinhole depth of a vertical segment: ``f * ratio * height / span``."""
    return f * ratio * height_m / span_px


def instance_depth(intr: CameraIntrinsics, det: Detection2D, tpl: KeypointTemplate,
                   h_meters: float) -> tuple[float, DepthPair]:
    pair = select_depth_pair(det.keypoints, det.visible)
    span = abs(float(det.keypoints[pair.top][1] - det.keypoints[pair.bottom][1]))
    if span < MIN_PAIR_SPAN_PX:
        raise DegeneratePair(f"pixel span {span:g} of {pair.top.name}/{pair.bottom.name} is degenerate")
    # the formula yields depth along the projection axis; undo the P2 offset
    z = depth_from_span(intr.f, pair_height_ratio(tpl, pair), h_meters, span) - intr.offset[2]
    return z, pair


def lift_keypoint(intr: CameraIntrinsics, det: Detection2D, tpl: KeypointTemplate,
                  pair: DepthPair, z: float) -> Point3:
    return backproject(intr, det.keypoints[pair.bottom], z)


def circular_mean(angles, weights) -> float:
    """Weighted mean direction of ``angles``, in [-pi, pi)."""
    w = np.asarray(weights, dtype=float)
    a = np.asarray(angles, dtype=float)
    s = float(np.dot(w, np.sin(a)))
    c = float(np.dot(w, np.cos(a)))
    if math.hypot(s, c) < 1e-9:
        raise DegenerateDistribution("weights have no dominant direction")
    return wrap_angle(math.atan2(s, c))


def decode_local_orientation(orient_bins) -> float:
    """Weighted mean of the bin medians, taken on the circle."""
    return circular_mean(BIN_MEDIANS, orient_bins)


def orientation_bin(theta_loc: float) -> int:
    return int(math.floor((theta_loc % (2.0 * math.pi)) / BIN_WIDTH)) % N_BINS


def ray_angle(p) -> float:
    return math.atan2(float(p[0]), float(p[2]))


def global_orientation(theta_loc: float, kp3d) -> float:
    return wrap_angle(theta_loc + ray_angle(kp3d))


def keypoint_to_center(kp3d, kp_id, yaw: float, dims: Sequence[float], tpl: KeypointTemplate) -> np.ndarray:
    w, h, l = dims
    r_w, r_h, r_l = center_offset_ratios(tpl, kp_id)
    return np.asarray(kp3d, dtype=float) - rot_y(yaw) @ np.array([l * r_l, h * r_h, w * r_w])


def assemble_pose(intr: CameraIntrinsics, det: Detection2D, tpl: KeypointTemplate,
                  theta_loc: float | None = None) -> Pose3D:
    """Full 3D pose of one detection.

    ``theta_loc`` overrides the binned local orientation (used to bypass
    bin quantisation in exactness checks).
    """
    dims = decode_dims(det, tpl)
    z, pair = instance_depth(intr, det, tpl, dims[1])
    kp3d = lift_keypoint(intr, det, tpl, pair, z)
    if theta_loc is None:
        theta_loc = decode_local_orientation(det.orient_bins)
    yaw = global_orientation(theta_loc, kp3d)
    center = keypoint_to_center(kp3d, pair.bottom, yaw, dims, tpl)
    return Pose3D(Point3(*center), yaw, dims, det.class_id, det.score)


def lift_all(intr: CameraIntrinsics, dets: Sequence[Detection2D], templates: Sequence[KeypointTemplate],
             threads: int = 1) -> list[Pose3D | Exception]:
    """Lift a batch; failures are returned in place rather than raised."""
    by_class = {t.class_id: t for t in templates}

    def one(det: Detection2D):
        try:
            return assemble_pose(intr, det, by_class[det.class_id])
        except (NoVisiblePair, DegeneratePair, DegenerateDistribution) as exc:
            return exc

    if threads <= 1:
        return [one(d) for d in dets]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, dets))
