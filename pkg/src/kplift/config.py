"""Run configuration: JSON document validated against a published schema."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from kplift.camera import CameraIntrinsics
from kplift.evalkit import DEFAULT_BUCKETS, DifficultyBucket, EvalConfig
from kplift.synth import SceneConfig
from kplift.templates import KeypointTemplate, builtin_templates, load_templates

# KITTI training frame 000000, camera 2
KITTI_P2 = (
    7.215377e02, 0.0, 6.095593e02, 4.485728e01,
    0.0, 7.215377e02, 1.728540e02, 2.163791e-01,
    0.0, 0.0, 1.0, 2.745884e-03,
)
KITTI_IMAGE_SIZE = (1242.0, 375.0)


class ConfigError(ValueError):
    pass


def run_config_schema() -> dict:
    text = resources.files("kplift").joinpath("data/run_config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    n_frames: int = 20
    camera: CameraIntrinsics = field(
        default_factory=lambda: CameraIntrinsics.from_p2(KITTI_P2, *KITTI_IMAGE_SIZE))
    eval: EvalConfig = field(default_factory=EvalConfig)
    templates_path: str | None = None

    def load_templates(self) -> list[KeypointTemplate]:
        return builtin_templates() if self.templates_path is None else load_templates(self.templates_path)


def parse_run_config(doc: dict, base_dir: Path | None = None) -> RunConfig:
    try:
        jsonschema.validate(doc, run_config_schema())
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {loc}: {exc.message}") from exc

    sc = dict(doc.get("scene", {}))
    n_frames = sc.pop("n_frames", 20)
    if "z_range" in sc:
        sc["z_range"] = tuple(sc["z_range"])
    cam = doc.get("camera", {})
    ev = doc.get("eval", {})
    buckets = DEFAULT_BUCKETS
    if "buckets" in ev:
        buckets = tuple(DifficultyBucket(**b) for b in ev["buckets"])
    tpl_path = doc.get("templates")
    if tpl_path is not None and base_dir is not None and not Path(tpl_path).is_absolute():
        tpl_path = str(base_dir / tpl_path)
    try:
        camera = CameraIntrinsics.from_p2(
            cam.get("p2", KITTI_P2),
            cam.get("image_w", KITTI_IMAGE_SIZE[0]),
            cam.get("image_h", KITTI_IMAGE_SIZE[1]),
        )
        eval_cfg = EvalConfig(
            classes=tuple(ev.get("classes", ("Car",))),
            neighbor_classes={k: tuple(v) for k, v in ev.get("neighbor_classes", {"Car": ["Van"]}).items()},
            iou_thresholds=tuple(ev.get("iou_thresholds", (0.5, 0.7))),
            buckets=buckets,
            n_points=ev.get("interpolation", 11),
            mae_iou=ev.get("mae_iou", 0.5),
            mae_bucket=ev.get("mae_bucket", "hard"),
        )
        return RunConfig(SceneConfig(**sc), n_frames, camera, eval_cfg, tpl_path)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_run_config(path) -> RunConfig:
    p = Path(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: not valid JSON ({exc})") from exc
    return parse_run_config(doc, p.parent)
