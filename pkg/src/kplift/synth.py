"""Deterministic synthetic scenes: the forward-projection oracle.

Every instance is placed on a flat ground plane, its template keypoints and
box corners are projected through the camera, and a noise-free
``Detection2D`` is synthesised from the projection. Lifting such a detection
must give back the generating pose.

Randomness comes from numpy's PCG64 bit generator seeded with
``SceneConfig.seed``; the draw order is fixed, so a scene is a pure function
of (config, intrinsics, templates).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from kplift.camera import CameraIntrinsics, Point3, project_points, rot_y, wrap_angle
from kplift.errors import FrustumExhausted, NoVisiblePair
from kplift.geometry3d import Box3D, box_corners, bev_footprint, convex_intersect, polygon_area
from kplift.kitti import (
    KeypointAnnotation,
    format_calib,
    format_detections,
    format_keypoint_annotations,
    frame_name,
    pose_to_label,
    write_label_file,
)
from kplift.lifting import (
    N_BINS,
    BIN_MEDIANS,
    Detection2D,
    Pose3D,
    encode_dims,
    orientation_bin,
    ray_angle,
    select_depth_pair,
)
from kplift.templates import DEPTH_PAIRS, N_CLASSES, KeypointTemplate

RNG_NAME = "numpy.random.PCG64"
DEFAULT_GROUND_Y = 1.65
YAW_MODES = ("uniform", "bin_aligned")
VISIBILITY_MODES = ("all_visible", "occlusion")
_FIXED_POINT_ITERS = 60


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    n_instances: int = 6
    z_range: tuple[float, float] = (6.0, 45.0)
    yaw: str = "uniform"
    dim_jitter: float = 0.05
    keypoint_noise_px: float = 0.0
    visibility_mode: str = "all_visible"
    ground_y: float = DEFAULT_GROUND_Y
    max_tries: int = 1000

    def __post_init__(self) -> None:
        z0, z1 = self.z_range
        if not 0 < z0 < z1:
            raise ValueError(f"z_range must satisfy 0 < z_min < z_max, got {self.z_range}")
        if self.dim_jitter < 0 or self.keypoint_noise_px < 0:
            raise ValueError("noise levels must be non-negative")
        if self.yaw not in YAW_MODES:
            raise ValueError(f"yaw mode must be one of {YAW_MODES}")
        if self.visibility_mode not in VISIBILITY_MODES:
            raise ValueError(f"visibility_mode must be one of {VISIBILITY_MODES}")
        if self.n_instances < 0:
            raise ValueError("n_instances must be non-negative")


@dataclass(frozen=True, eq=False)
class SyntheticInstance:
    gt: Pose3D
    det: Detection2D
    gt_keypoints_2d: np.ndarray  # (14, 2) noise-free projections
    gt_visible: np.ndarray  # (14,)
    theta_loc: float  # exact local angle w.r.t. the reference keypoint ray
    truncated: float
    occluded: int
    box2d_full: tuple[float, float, float, float] = field(default=(0.0, 0.0, 0.0, 0.0))


def instance_keypoints_3d(tpl: KeypointTemplate, center, yaw: float, dims) -> np.ndarray:
    """Camera-frame positions of the template keypoints for a pose."""
    w, h, l = dims
    return (tpl.keypoints * np.array([l, h, w])) @ rot_y(yaw).T + np.asarray(center, dtype=float)


def _in_image(intr: CameraIntrinsics, uv: np.ndarray) -> np.ndarray:
    return (uv[:, 0] >= 0) & (uv[:, 0] <= intr.image_w) & (uv[:, 1] >= 0) & (uv[:, 1] <= intr.image_h)


def _hull(uv: np.ndarray) -> tuple[float, float, float, float]:
    return float(uv[:, 0].min()), float(uv[:, 1].min()), float(uv[:, 0].max()), float(uv[:, 1].max())


def _clip_box(intr: CameraIntrinsics, box):
    x0, y0, x1, y1 = box
    return (min(max(x0, 0.0), intr.image_w), min(max(y0, 0.0), intr.image_h),
            min(max(x1, 0.0), intr.image_w), min(max(y1, 0.0), intr.image_h))


def _area(box) -> float:
    return max(box[2] - box[0], 0.0) * max(box[3] - box[1], 0.0)


def _reference_keypoint(uv: np.ndarray, visible: np.ndarray) -> int | None:
    """Keypoint whose ray lifting will use: bottom of the selected depth pair."""
    try:
        return int(select_depth_pair(uv, visible).bottom)
    except NoVisiblePair:
        return None


@dataclass
class _Placed:
    cls: int
    dims: tuple[float, float, float]
    center: np.ndarray
    yaw: float
    kp3d: np.ndarray
    uv: np.ndarray
    in_img: np.ndarray
    box_full: tuple[float, float, float, float]
    box: tuple[float, float, float, float]
    footprint: list


def _place(intr, tpl, cls, dims, center, yaw) -> _Placed | None:
    corners = box_corners(center, yaw, dims)
    shift_z = intr.offset[2]
    if np.any(corners[:, 2] <= 0.1) or np.any(corners[:, 2] + shift_z <= 0.1):
        return None
    kp3d = instance_keypoints_3d(tpl, center, yaw, dims)
    uv = project_points(intr, kp3d)
    in_img = _in_image(intr, uv)
    if not any(in_img[p.top] and in_img[p.bottom] for p in DEPTH_PAIRS):
        return None
    box_full = _hull(project_points(intr, corners))
    box = _clip_box(intr, box_full)
    if not (box[0] < box[2] and box[1] < box[3]):
        return None
    fp = bev_footprint(Box3D(Point3(*center), yaw, dims))
    return _Placed(cls, dims, center, yaw, kp3d, uv, in_img, box_full, box, fp)


def _bin_aligned_yaw(intr, tpl, cls, dims, center, theta_loc) -> _Placed | None:
    """Solve ``yaw = theta_loc + ray(reference keypoint(yaw))`` by fixed-point iteration."""
    yaw = wrap_angle(theta_loc + math.atan2(center[0], center[2]))
    for _ in range(_FIXED_POINT_ITERS):
        placed = _place(intr, tpl, cls, dims, center, yaw)
        if placed is None:
            return None
        ref = _reference_keypoint(placed.uv, placed.in_img)
        new_yaw = wrap_angle(theta_loc + ray_angle(placed.kp3d[ref]))
        if abs(wrap_angle(new_yaw - yaw)) < 1e-15:
            return placed
        yaw = new_yaw
    return None


def generate_scene(cfg: SceneConfig, intr: CameraIntrinsics,
                   templates: Sequence[KeypointTemplate]) -> list[SyntheticInstance]:
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    by_class = {t.class_id: t for t in templates}
    z0, z1 = cfg.z_range
    tx, _, tz = intr.offset
    placed: list[_Placed] = []

    for idx in range(cfg.n_instances):
        for _ in range(cfg.max_tries):
            cls = int(rng.integers(N_CLASSES))
            tpl = by_class[cls]
            dims = tuple(float(m * math.exp(cfg.dim_jitter * g))
                         for m, g in zip(tpl.mean_dims, rng.standard_normal(3)))
            z = float(rng.uniform(z0, z1))
            u = float(rng.uniform(0.0, intr.image_w))
            x = (u - intr.p_x) * (z + tz) / intr.f - tx
            center = np.array([x, cfg.ground_y - dims[1] / 2.0, z])
            yaw_draw = float(rng.uniform(-math.pi, math.pi))
            bin_draw = int(rng.integers(N_BINS))
            if cfg.yaw == "uniform":
                cand = _place(intr, tpl, cls, dims, center, wrap_angle(yaw_draw))
            else:
                cand = _bin_aligned_yaw(intr, tpl, cls, dims, center, wrap_angle(float(BIN_MEDIANS[bin_draw])))
            if cand is None:
                continue
            if any(polygon_area(convex_intersect(cand.footprint, p.footprint)) > 0 for p in placed):
                continue
            placed.append(cand)
            break
        else:
            raise FrustumExhausted(f"instance {idx}: {cfg.max_tries} placement attempts failed")

    instances = []
    for i, p in enumerate(placed):
        nearer = [q.box for q in placed if q.center[2] < p.center[2]]
        covered = np.zeros(len(p.uv), dtype=bool)
        for bx in nearer:
            covered |= (p.uv[:, 0] >= bx[0]) & (p.uv[:, 0] <= bx[2]) & (p.uv[:, 1] >= bx[1]) & (p.uv[:, 1] <= bx[3])
        occluded_frac = float(np.sum(covered & p.in_img)) / max(int(np.sum(p.in_img)), 1)
        occluded = 0 if occluded_frac == 0 else (1 if occluded_frac <= 0.5 else 2)
        visible = p.in_img & ~covered if cfg.visibility_mode == "occlusion" else p.in_img.copy()

        ref = _reference_keypoint(p.uv, visible)
        ray_pt = p.kp3d[ref] if ref is not None else p.center
        theta_loc = wrap_angle(p.yaw - ray_angle(ray_pt))
        bins = np.zeros(N_BINS)
        bins[orientation_bin(theta_loc)] = 1.0
        probs = np.zeros(N_CLASSES)
        probs[p.cls] = 1.0
        noise = cfg.keypoint_noise_px * rng.standard_normal((len(p.uv), 2))
        score = float(rng.uniform(0.5, 1.0))

        tpl = by_class[p.cls]
        det = Detection2D(
            box2d=p.box,
            keypoints=p.uv + noise,
            visible=visible,
            orient_bins=bins,
            dim_offsets=encode_dims(p.dims, tpl),
            class_probs=probs,
            score=score,
        )
        gt = Pose3D(Point3(*p.center), p.yaw, p.dims, p.cls, 1.0)
        full = _area(p.box_full)
        truncated = 0.0 if full <= 0 else max(0.0, 1.0 - _area(p.box) / full)
        instances.append(SyntheticInstance(gt, det, p.uv.copy(), visible, theta_loc, truncated, occluded, p.box_full))
    return instances


def degrade(det: Detection2D, noise_px: float, drop_prob: float, seed: int) -> Detection2D:
    """Add Gaussian pixel noise to keypoints and randomly hide visible ones."""
    if noise_px < 0 or not 0.0 <= drop_prob <= 1.0:
        raise ValueError("need noise_px >= 0 and drop_prob in [0, 1]")
    rng = np.random.Generator(np.random.PCG64(seed))
    noise = noise_px * rng.standard_normal(det.keypoints.shape)
    drop = rng.random(len(det.visible)) < drop_prob
    return replace(det, keypoints=det.keypoints + noise, visible=det.visible & ~drop)


def frame_seed(seed: int, frame: int) -> int:
    """Independent per-frame seed derived from a run seed."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(frame,))
    return int(ss.generate_state(1, np.uint64)[0])


def dump_scene(out_dir, intr: CameraIntrinsics, frames: Sequence[tuple[int, Sequence[SyntheticInstance]]]) -> dict:
    """Write calib.txt, gt/, kp/ and det/ for the given frames; returns counts."""
    out = Path(out_dir)
    for sub in ("gt", "kp", "det"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "calib.txt").write_text(format_calib(intr), encoding="utf-8")
    n_inst = 0
    for frame, insts in frames:
        n_inst += len(insts)
        labels = [pose_to_label(s.gt, s.det.box2d, "Car", truncated=round(s.truncated, 6), occluded=s.occluded)
                  for s in insts]
        (out / "gt" / frame_name(frame, ".txt")).write_text(write_label_file(labels), encoding="utf-8")
        anns = [KeypointAnnotation(frame, s.gt.class_id, s.gt_keypoints_2d, s.gt_visible) for s in insts]
        (out / "kp" / frame_name(frame, ".jsonl")).write_text(format_keypoint_annotations(anns), encoding="utf-8")
        (out / "det" / frame_name(frame, ".jsonl")).write_text(
            format_detections(s.det for s in insts), encoding="utf-8")
    return {"frames": len(frames), "instances": n_inst}
