"""KITTI label / calibration / result files and the toolkit's JSON-lines records.

Label lines hold ``type truncated occluded alpha bbox(4) h w l x y z ry [score]``.
KITTI ``location`` is the bottom-center of the box; the geometric center used
everywhere else in kplift is ``(x, y - h/2, z)``. That conversion happens in
this module only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from kplift.camera import CameraIntrinsics, Point3, wrap_angle
from kplift.errors import MalformedLine, MalformedMatrix, MissingMatrix, ParseError
from kplift.geometry3d import Box3D
from kplift.lifting import Detection2D, Pose3D
from kplift.templates import N_KEYPOINTS


@dataclass(frozen=True)
class KittiLabel:
    type: str
    truncated: float
    occluded: int
    alpha: float
    bbox: tuple[float, float, float, float]
    dims_hwl: tuple[float, float, float]
    location: tuple[float, float, float]
    rotation_y: float
    score: float | None = None

    @property
    def center(self) -> Point3:
        x, y, z = self.location
        return Point3(x, y - self.dims_hwl[0] / 2.0, z)

    @property
    def dims(self) -> tuple[float, float, float]:
        """(w, h, l) ordering used by poses and boxes."""
        h, w, l = self.dims_hwl
        return w, h, l

    @property
    def box_height(self) -> float:
        return self.bbox[3] - self.bbox[1]

    def box3d(self) -> Box3D:
        return Box3D(self.center, self.rotation_y, self.dims)


def _check_label(lab: KittiLabel) -> str | None:
    if lab.type != "DontCare":
        if any(d < 0 for d in lab.dims_hwl):
            return "negative dimension"
        if lab.occluded not in (-1, 0, 1, 2, 3):
            return f"occlusion level {lab.occluded} not in 0..3"
    x0, y0, x1, y1 = lab.bbox
    if x0 > x1 or y0 > y1:
        return "bbox corners out of order"
    return None


def parse_label_line(line: str, line_no: int = 1) -> KittiLabel:
    parts = line.split()
    if len(parts) not in (15, 16):
        raise MalformedLine(line_no, f"expected 15 or 16 fields, got {len(parts)}")
    try:
        nums = [float(p) for p in parts[1:]]
        occluded = int(float(parts[2]))
    except ValueError as exc:
        raise MalformedLine(line_no, f"non-numeric field ({exc})") from exc
    if not all(math.isfinite(v) for v in nums):
        raise MalformedLine(line_no, "non-finite value")
    if nums[1] != occluded:
        raise MalformedLine(line_no, "occlusion must be an integer")
    lab = KittiLabel(
        type=parts[0],
        truncated=nums[0],
        occluded=occluded,
        alpha=nums[2],
        bbox=tuple(nums[3:7]),
        dims_hwl=tuple(nums[7:10]),
        location=tuple(nums[10:13]),
        rotation_y=nums[13],
        score=nums[14] if len(nums) == 15 else None,
    )
    problem = _check_label(lab)
    if problem:
        raise MalformedLine(line_no, problem)
    return lab


def parse_label_file(text: str) -> list[KittiLabel]:
    labels = []
    for i, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            labels.append(parse_label_line(line, i))
    return labels


def _fmt(v: float) -> str:
    s = f"{v:.6f}"
    return "0.000000" if s == "-0.000000" else s


def format_label_line(lab: KittiLabel) -> str:
    fields = [
        lab.type,
        _fmt(lab.truncated),
        str(int(lab.occluded)),
        _fmt(lab.alpha),
        *(_fmt(v) for v in lab.bbox),
        *(_fmt(v) for v in lab.dims_hwl),
        *(_fmt(v) for v in lab.location),
        _fmt(lab.rotation_y),
    ]
    if lab.score is not None:
        fields.append(_fmt(lab.score))
    return " ".join(fields)


def write_label_file(labels: Iterable[KittiLabel]) -> str:
    return "".join(format_label_line(lab) + "\n" for lab in labels)


def pose_to_label(pose: Pose3D, box2d: Sequence[float], type_name: str = "Car",
                  truncated: float = -1.0, occluded: int = -1, score: float | None = None) -> KittiLabel:
    w, h, l = pose.dims
    x, y, z = pose.center
    return KittiLabel(
        type=type_name,
        truncated=truncated,
        occluded=occluded,
        alpha=wrap_angle(pose.yaw - math.atan2(x, z)),
        bbox=tuple(float(v) for v in box2d),
        dims_hwl=(h, w, l),
        location=(x, y + h / 2.0, z),
        rotation_y=pose.yaw,
        score=score,
    )


@dataclass(frozen=True)
class ResultRecord:
    """One detection destined for a KITTI result file. ``pose.score`` is written."""

    pose: Pose3D
    box2d: tuple[float, float, float, float]
    type_name: str = "Car"

    def __post_init__(self) -> None:
        if self.pose.score is None:
            raise ValueError("result records need a detection score")

    def to_label(self) -> KittiLabel:
        return pose_to_label(self.pose, self.box2d, self.type_name, score=self.pose.score)


def write_result_file(records: Iterable[ResultRecord]) -> str:
    return write_label_file(r.to_label() for r in records)


@dataclass(frozen=True)
class CalibFile:
    matrices: dict[str, tuple[float, ...]]

    @property
    def P2(self) -> np.ndarray:
        return np.array(self.matrices["P2"]).reshape(3, 4)


def parse_calib(text: str) -> CalibFile:
    mats: dict[str, tuple[float, ...]] = {}
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, rest = line.partition(":")
        if not sep:
            raise ParseError(f"calibration line {i} has no 'Key:' prefix")
        try:
            mats[key.strip()] = tuple(float(v) for v in rest.split())
        except ValueError as exc:
            raise MalformedMatrix(f"{key.strip()}: non-numeric entry ({exc})") from exc
    if "P2" not in mats:
        raise MissingMatrix("P2")
    p2 = mats["P2"]
    if len(p2) != 12:
        raise MalformedMatrix(f"P2 needs 12 values, got {len(p2)}")
    if not all(math.isfinite(v) for v in p2):
        raise MalformedMatrix("P2 has non-finite entries")
    if not p2[0] > 0:
        raise MalformedMatrix("P2[0][0] must be positive")
    if abs(p2[5] - p2[0]) > 0.01 * p2[0]:
        raise MalformedMatrix("P2 focal lengths differ by more than 1%")
    return CalibFile(mats)


def to_intrinsics(calib: CalibFile, image_w: float, image_h: float) -> CameraIntrinsics:
    return CameraIntrinsics.from_p2(calib.P2, image_w, image_h)


def format_calib(intr: CameraIntrinsics) -> str:
    """A devkit-style calibration file whose P2 encodes ``intr``."""
    def row(vals) -> str:
        return " ".join(repr(float(v)) for v in np.asarray(vals).reshape(-1))

    k0 = np.hstack([intr.p2()[:, :3], np.zeros((3, 1))])
    eye34 = np.hstack([np.eye(3), np.zeros((3, 1))])
    lines = [
        f"P0: {row(k0)}",
        f"P1: {row(k0)}",
        f"P2: {row(intr.p2())}",
        f"P3: {row(k0)}",
        f"R0_rect: {row(np.eye(3))}",
        f"Tr_velo_to_cam: {row(eye34)}",
        f"Tr_imu_to_velo: {row(eye34)}",
    ]
    return "\n".join(lines) + "\n"


# --- JSON-lines records -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class KeypointAnnotation:
    frame: int
    class_id: int
    keypoints: np.ndarray  # (14, 2)
    visible: np.ndarray  # (14,) bool


def _kp_rows(keypoints, visible) -> list[list]:
    return [[float(u), float(v), int(bool(vis))] for (u, v), vis in zip(keypoints, visible)]


def _kp_arrays(rows) -> tuple[np.ndarray, np.ndarray]:
    if not isinstance(rows, list) or len(rows) != N_KEYPOINTS:
        raise ValueError(f"expected {N_KEYPOINTS} keypoints")
    arr = np.array([[float(r[0]), float(r[1])] for r in rows])
    vis = np.array([bool(int(r[2])) for r in rows])
    return arr, vis


def format_keypoint_annotations(anns: Iterable[KeypointAnnotation]) -> str:
    return "".join(
        json.dumps({"frame": a.frame, "class_id": a.class_id, "keypoints": _kp_rows(a.keypoints, a.visible)}) + "\n"
        for a in anns
    )


def parse_keypoint_annotations(text: str, image_size: tuple[float, float] | None = None) -> list[KeypointAnnotation]:
    out = []
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            kp, vis = _kp_arrays(obj["keypoints"])
            ann = KeypointAnnotation(int(obj["frame"]), int(obj["class_id"]), kp, vis)
        except (ValueError, KeyError, TypeError, IndexError) as exc:
            raise MalformedLine(i, str(exc)) from exc
        if not 0 <= ann.class_id < 5:
            raise MalformedLine(i, f"class id {ann.class_id} outside 0..4")
        if image_size is not None:
            w, h = image_size
            pts = ann.keypoints[ann.visible]
            if np.any((pts < 0) | (pts > [w, h])):
                raise MalformedLine(i, "visible keypoint outside the image")
        out.append(ann)
    return out


def detection_to_json(det: Detection2D) -> str:
    return json.dumps({
        "box2d": list(det.box2d),
        "keypoints": _kp_rows(det.keypoints, det.visible),
        "orient_bins": [float(p) for p in det.orient_bins],
        "dim_offsets": list(det.dim_offsets),
        "class_probs": [float(p) for p in det.class_probs],
        "score": det.score,
    })


def format_detections(dets: Iterable[Detection2D]) -> str:
    return "".join(detection_to_json(d) + "\n" for d in dets)


def parse_detections(text: str) -> list[Detection2D]:
    out = []
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            kp, vis = _kp_arrays(obj["keypoints"])
            out.append(Detection2D(
                box2d=tuple(obj["box2d"]),
                keypoints=kp,
                visible=vis,
                orient_bins=obj["orient_bins"],
                dim_offsets=tuple(obj["dim_offsets"]),
                class_probs=obj["class_probs"],
                score=obj.get("score", 1.0),
            ))
        except (ValueError, KeyError, TypeError, IndexError) as exc:
            raise MalformedLine(i, str(exc)) from exc
    return out


def frame_name(frame: int, ext: str) -> str:
    return f"{frame:06d}{ext}"
