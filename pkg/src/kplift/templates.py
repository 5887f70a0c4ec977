"""Geometric classes: CAD keypoint templates, mean dimensions and ratios.

Model frame of a template (unit-normalised, every coordinate in [-0.5, 0.5]):
x is the length axis pointing forward, y the height axis pointing down,
z the width axis pointing to the car's left. Under a yaw rotation the model
axes map onto camera axes, so a keypoint's metric position relative to the
object center is ``(l * x, h * y, w * z)``.

Template file format (UTF-8 JSON): a top-level array of 5 objects::

    {"class_id": 0, "mean_dims": {"w": 1.62, "h": 1.48, "l": 4.2},
     "keypoints": {"wheel_fl": [x, y, z], ...}}

All 14 keypoint names are required; ``name`` is optional.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from kplift.errors import IllegalPair, InvariantViolation, ParseError

N_KEYPOINTS = 14
N_CLASSES = 5
VERTICAL_TOLERANCE = 0.02
SYMMETRY_TOLERANCE = 1e-9


class KeypointId(enum.IntEnum):
    wheel_fl = 0
    wheel_fr = 1
    wheel_rl = 2
    wheel_rr = 3
    windshield_front_tl = 4
    windshield_front_tr = 5
    windshield_front_bl = 6
    windshield_front_br = 7
    windshield_rear_tl = 8
    windshield_rear_tr = 9
    windshield_rear_bl = 10
    windshield_rear_br = 11
    headlight_l = 12
    headlight_r = 13


# (left, right) twins; mirrored across the width axis
MIRROR_PAIRS = (
    (KeypointId.wheel_fl, KeypointId.wheel_fr),
    (KeypointId.wheel_rl, KeypointId.wheel_rr),
    (KeypointId.windshield_front_tl, KeypointId.windshield_front_tr),
    (KeypointId.windshield_front_bl, KeypointId.windshield_front_br),
    (KeypointId.windshield_rear_tl, KeypointId.windshield_rear_tr),
    (KeypointId.windshield_rear_bl, KeypointId.windshield_rear_br),
    (KeypointId.headlight_l, KeypointId.headlight_r),
)


class DepthPair(NamedTuple):
    top: KeypointId
    bottom: KeypointId


# Order doubles as the tie-break order for pair selection.
DEPTH_PAIRS: tuple[DepthPair, ...] = (
    DepthPair(KeypointId.windshield_front_tl, KeypointId.windshield_front_bl),
    DepthPair(KeypointId.windshield_front_tr, KeypointId.windshield_front_br),
    DepthPair(KeypointId.windshield_rear_tl, KeypointId.windshield_rear_bl),
    DepthPair(KeypointId.windshield_rear_tr, KeypointId.windshield_rear_br),
)


@dataclass(frozen=True, eq=False)
class KeypointTemplate:
    class_id: int
    keypoints: np.ndarray  # (14, 3) model-frame coordinates, rows indexed by KeypointId
    mean_dims: tuple[float, float, float]  # (w, h, l) meters
    name: str = field(default="")

    def __post_init__(self) -> None:
        kp = np.array(self.keypoints, dtype=float).reshape(N_KEYPOINTS, 3)
        kp.setflags(write=False)
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "mean_dims", tuple(float(d) for d in self.mean_dims))

    def keypoint(self, kp: KeypointId) -> np.ndarray:
        return self.keypoints[int(kp)]


def pair_height_ratio(tpl: KeypointTemplate, pair) -> float:
    """Vertical span of a depth pair as a fraction of full model height."""
    pair = _legal_pair(pair)
    return abs(float(tpl.keypoint(pair.top)[1] - tpl.keypoint(pair.bottom)[1]))


def center_offset_ratios(tpl: KeypointTemplate, kp: KeypointId) -> tuple[float, float, float]:
    """Signed (r_w, r_h, r_l) of a keypoint relative to the model center.

    ``(w * r_w, h * r_h, l * r_l)`` is the metric center-to-keypoint offset
    along the width, height and length axes.
    """
    x, y, z = tpl.keypoint(KeypointId(kp))
    return float(z), float(y), float(x)


def _legal_pair(pair) -> DepthPair:
    try:
        p = DepthPair(KeypointId(pair[0]), KeypointId(pair[1]))
    except (TypeError, ValueError, IndexError) as exc:
        raise IllegalPair(f"not a keypoint pair: {pair!r}") from exc
    if p not in DEPTH_PAIRS:
        raise IllegalPair(f"{p.top.name}/{p.bottom.name} is not a depth pair")
    return p


def dimension_ratios(dims: Sequence[float]) -> tuple[float, float]:
    w, h, l = dims
    return w / h, l / h


def classify_by_ratios(dims: Sequence[float], templates: Sequence[KeypointTemplate]) -> int:
    """Nearest geometric class by (w/h, l/h) aspect ratios."""
    target = np.array(dimension_ratios(dims))
    best = min(
        templates,
        key=lambda t: (float(np.sum((np.array(dimension_ratios(t.mean_dims)) - target) ** 2)), t.class_id),
    )
    return best.class_id


def validate_templates(templates: Sequence[KeypointTemplate]) -> None:
    """Raise InvariantViolation on the first broken template rule."""
    if len(templates) != N_CLASSES:
        raise InvariantViolation("template count", None, f"expected {N_CLASSES}, got {len(templates)}")
    ids = sorted(t.class_id for t in templates)
    if ids != list(range(N_CLASSES)):
        raise InvariantViolation("class ids", None, f"expected 0..{N_CLASSES - 1}, got {ids}")
    for t in templates:
        kp = t.keypoints
        if not np.all(np.isfinite(kp)) or np.any(np.abs(kp) > 0.5):
            raise InvariantViolation("coordinates within [-0.5, 0.5]", t.class_id)
        for left, right in MIRROR_PAIRS:
            a, b = kp[left], kp[right]
            if (abs(a[0] - b[0]) > SYMMETRY_TOLERANCE or abs(a[1] - b[1]) > SYMMETRY_TOLERANCE
                    or abs(a[2] + b[2]) > SYMMETRY_TOLERANCE):
                raise InvariantViolation("mirror symmetry", t.class_id, f"{left.name}/{right.name}")
        for pair in DEPTH_PAIRS:
            top, bottom = kp[pair.top], kp[pair.bottom]
            if abs(top[0] - bottom[0]) > VERTICAL_TOLERANCE:
                raise InvariantViolation("near-vertical windshield", t.class_id,
                                         f"{pair.top.name}/{pair.bottom.name}")
            if not top[1] < bottom[1]:
                raise InvariantViolation("depth pair span", t.class_id,
                                         f"{pair.top.name} must lie above {pair.bottom.name}")
        if not all(d > 0 for d in t.mean_dims):
            raise InvariantViolation("positive mean dims", t.class_id)


def _template_from_json(obj) -> KeypointTemplate:
    try:
        cid = int(obj["class_id"])
        md = obj["mean_dims"]
        dims = (float(md["w"]), float(md["h"]), float(md["l"]))
        raw = obj["keypoints"]
        missing = [k.name for k in KeypointId if k.name not in raw]
        if missing:
            raise InvariantViolation("all 14 keypoints present", cid, ", ".join(missing))
        kp = np.array([[float(c) for c in raw[k.name]] for k in KeypointId])
        if kp.shape != (N_KEYPOINTS, 3):
            raise ParseError(f"template {cid}: keypoints must be [x, y, z] triples")
    except InvariantViolation:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad template entry: {exc}") from exc
    return KeypointTemplate(cid, kp, dims, str(obj.get("name", "")))


def templates_from_json(text: str) -> list[KeypointTemplate]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"template file is not valid JSON: {exc}") from exc
    if not isinstance(doc, list):
        raise ParseError("template file must hold a JSON array")
    tpls = sorted((_template_from_json(o) for o in doc), key=lambda t: t.class_id)
    validate_templates(tpls)
    return tpls


def templates_to_json(templates: Iterable[KeypointTemplate]) -> str:
    rows = []
    for t in sorted(templates, key=lambda t: t.class_id):
        w, h, l = t.mean_dims
        rows.append(json.dumps({
            "class_id": t.class_id,
            "name": t.name,
            "mean_dims": {"w": w, "h": h, "l": l},
            "keypoints": {k.name: [float(c) for c in t.keypoints[k]] for k in KeypointId},
        }))
    return "[\n" + ",\n".join("  " + r for r in rows) + "\n]\n"


def load_templates(path) -> list[KeypointTemplate]:
    return templates_from_json(Path(path).read_text(encoding="utf-8"))


def builtin_templates() -> list[KeypointTemplate]:
    text = resources.files("kplift").joinpath("data/templates.json").read_text(encoding="utf-8")
    return templates_from_json(text)


def with_mean_dims(templates: Sequence[KeypointTemplate], stats: dict) -> list[KeypointTemplate]:
    """Override per-class mean dimensions, e.g. from dataset statistics.

    ``stats`` maps class id (int or str) to ``{"w": .., "h": .., "l": ..}``.
    """
    out = []
    for t in templates:
        md = stats.get(t.class_id, stats.get(str(t.class_id)))
        dims = t.mean_dims if md is None else (md["w"], md["h"], md["l"])
        out.append(KeypointTemplate(t.class_id, t.keypoints, dims, t.name))
    validate_templates(out)
    return out
