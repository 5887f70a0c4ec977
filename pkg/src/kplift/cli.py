"""Command-line entry point.

Exit codes: 0 success, 1 check failure, 2 input/config error, 3 IO error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from kplift import __version__
from kplift.camera import CameraIntrinsics
from kplift.config import KITTI_IMAGE_SIZE, ConfigError, RunConfig, load_run_config
from kplift.errors import KpliftError, MalformedLine, MissingFrame, NoVisiblePair
from kplift.evalkit import evaluate, write_pr_svgs
from kplift.kitti import (
    ResultRecord,
    parse_calib,
    parse_detections,
    parse_keypoint_annotations,
    parse_label_file,
    to_intrinsics,
    write_result_file,
)
from kplift.lifting import assemble_pose, orientation_bin, ray_angle, select_depth_pair
from kplift.losses import (
    PARAM_NAMES,
    KeypointPrediction,
    KeypointTarget,
    PoseParams,
    ReprojectionTarget,
    dim_loss,
    gradient_relative_error,
    is_non_kink,
    keypoint_loss,
    normalize_keypoints,
    numeric_gradient,
    orientation_loss,
    reprojection_loss,
)
from kplift.synth import RNG_NAME, dump_scene, frame_seed, generate_scene, instance_keypoints_3d
from kplift.templates import builtin_templates, load_templates, templates_to_json

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_IO = 0, 1, 2, 3
GRAD_STEP = 1e-5
GRAD_TOL = 1e-4


class InputError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"kplift: {msg}", file=sys.stderr)


def _read(path: Path) -> str:
    try:
        return path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise InputError(f"{path}: no such file") from exc
    except UnicodeDecodeError as exc:
        raise InputError(f"{path}: not UTF-8 text") from exc


def _templates(path):
    return builtin_templates() if path is None else load_templates(path)


def _intrinsics(calib_path: Path, image_size) -> CameraIntrinsics:
    return to_intrinsics(parse_calib(_read(calib_path)), *image_size)


# --- synth --------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, out_dir: Path, threads: int = 1) -> dict:
    templates = cfg.load_templates()

    def one(frame: int):
        scene = replace(cfg.scene, seed=frame_seed(cfg.scene.seed, frame))
        return frame, generate_scene(scene, cfg.camera, templates)

    frames = range(cfg.n_frames)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            generated = list(pool.map(one, frames))
    else:
        generated = [one(f) for f in frames]
    counts = dump_scene(out_dir, cfg.camera, generated)
    manifest = {
        "seed": cfg.scene.seed,
        "rng_name": RNG_NAME,
        "spec_version": __version__,
        "counts": counts,
        "scene": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg.scene).items()},
        "image_size": [cfg.camera.image_w, cfg.camera.image_h],
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


# --- lift ---------------------------------------------------------------------

def cmd_lift(det_dir: Path, calib: Path, templates_path, out_dir: Path,
             image_size=KITTI_IMAGE_SIZE, threads: int = 1) -> dict:
    if not det_dir.is_dir():
        raise InputError(f"{det_dir}: not a directory")
    intr = _intrinsics(calib, image_size)
    by_class = {t.class_id: t for t in _templates(templates_path)}
    files = sorted(det_dir.glob("*.jsonl"))
    parsed = []
    for f in files:
        try:
            parsed.append((f.stem, parse_detections(_read(f))))
        except MalformedLine as exc:
            raise InputError(f"frame {f.stem}, line {exc.line_no}: {exc.reason}") from exc

    def one(item):
        frame, dets = item
        records, skipped = [], {}
        for det in dets:
            try:
                pose = assemble_pose(intr, det, by_class[det.class_id])
            except KpliftError as exc:
                key = type(exc).__name__
                skipped[key] = skipped.get(key, 0) + 1
                continue
            records.append(ResultRecord(pose, det.box2d))
        return frame, records, skipped

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, parsed))
    else:
        results = [one(p) for p in parsed]

    out_dir.mkdir(parents=True, exist_ok=True)
    skipped_total: dict[str, int] = {}
    n_written = 0
    for frame, records, skipped in results:
        (out_dir / f"{frame}.txt").write_text(write_result_file(records), encoding="utf-8")
        n_written += len(records)
        for k, v in skipped.items():
            skipped_total[k] = skipped_total.get(k, 0) + v
    n_skip = sum(skipped_total.values())
    detail = ", ".join(f"{k}={v}" for k, v in sorted(skipped_total.items()))
    print(f"lifted {n_written} detections in {len(results)} frames; skipped {n_skip}"
          + (f" ({detail})" if detail else ""), file=sys.stderr)
    return {"frames": len(results), "lifted": n_written, "skipped": n_skip}


# --- eval ---------------------------------------------------------------------

def cmd_eval(gt_dir: Path, det_dir: Path, calib: Path, cfg: RunConfig, out_dir: Path | None,
             formats=("csv", "json"), svg: bool = False, threads: int = 1):
    for d in (gt_dir,):
        if not d.is_dir():
            raise InputError(f"{d}: not a directory")
    if not calib.exists():
        raise InputError(f"{calib}: calibration not found")
    try:
        report = evaluate(gt_dir, det_dir, calib, replace(cfg.eval, threads=threads))
    except MissingFrame as exc:
        raise InputError(f"frame {exc.frame_id}: missing {exc.path}") from exc
    except MalformedLine as exc:
        raise InputError(str(exc)) from exc
    print(report.table(), end="")
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if "csv" in formats:
            (out_dir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
        if "json" in formats:
            (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
        if svg:
            write_pr_svgs(report, out_dir / "pr")
    return report


# --- losscheck ----------------------------------------------------------------

def _scene_instances(scene_dir: Path, templates):
    """(template, gt label, keypoint annotation, detection) per instance."""
    calib = scene_dir / "calib.txt"
    manifest = scene_dir / "manifest.json"
    size = KITTI_IMAGE_SIZE
    if manifest.is_file():
        size = tuple(json.loads(_read(manifest)).get("image_size", size))
    intr = _intrinsics(calib, size)
    by_class = {t.class_id: t for t in templates}
    out = []
    for gf in sorted((scene_dir / "gt").glob("*.txt")):
        fid = gf.stem
        gts = parse_label_file(_read(gf))
        kps = parse_keypoint_annotations(_read(scene_dir / "kp" / f"{fid}.jsonl"))
        dets = parse_detections(_read(scene_dir / "det" / f"{fid}.jsonl"))
        if not len(gts) == len(kps) == len(dets):
            raise InputError(f"frame {fid}: gt/kp/det record counts differ")
        for g, k, d in zip(gts, kps, dets):
            out.append((by_class[k.class_id], g, k, d))
    return intr, out


def _gt_params(label) -> PoseParams:
    return PoseParams(label.center, label.rotation_y, label.dims)


def cmd_losscheck(scene_dir: Path, templates_path, n_samples: int, seed: int) -> int:
    templates = _templates(templates_path)
    intr, instances = _scene_instances(scene_dir, templates)
    # a truncated label carries an image-clipped box, so its box term is not zero at truth
    worst = {"reprojection": 0.0, "reproj_trunc": 0.0, "keypoint": 0.0, "dimension": 0.0, "orientation": 0.0}
    for tpl, g, k, d in instances:
        params = _gt_params(g)
        target = ReprojectionTarget(k.keypoints, k.visible, g.bbox)
        key = "reprojection" if g.truncated <= 0 else "reproj_trunc"
        worst[key] = max(worst[key], reprojection_loss(intr, tpl, params, target, with_grad=False).value)
        gt_kp = KeypointTarget(np.clip(normalize_keypoints(k.keypoints, g.bbox), 0, 1), k.visible)
        probs = np.column_stack([~d.visible, d.visible]).astype(float)
        pred = KeypointPrediction(normalize_keypoints(d.keypoints, g.bbox), probs)
        worst["keypoint"] = max(worst["keypoint"], keypoint_loss(gt_kp, pred)[2])
        worst["dimension"] = max(worst["dimension"], dim_loss(g.dims, d.dim_offsets, tpl))
        try:
            ref = select_depth_pair(k.keypoints, k.visible).bottom
            ray_pt = instance_keypoints_3d(tpl, g.center, g.rotation_y, g.dims)[ref]
        except NoVisiblePair:
            ray_pt = g.center
        gt_bin = orientation_bin(g.rotation_y - ray_angle(ray_pt))
        worst["orientation"] = max(worst["orientation"], orientation_loss(gt_bin, d.orient_bins))
    print(f"value check over {len(instances)} instances (max loss at ground truth):")
    for name, v in worst.items():
        print(f"  {name:<13}{v:.3e}")

    if n_samples <= 0 or not instances:
        print("gradient audit skipped")
        return EXIT_OK
    rng = np.random.Generator(np.random.PCG64(seed))
    max_err, where = 0.0, None
    done = 0
    attempts = 0
    while done < n_samples:
        attempts += 1
        if attempts > 200 * n_samples:
            _err("could not find enough non-kink sample points")
            return EXIT_CHECK
        tpl, g, k, _ = instances[int(rng.integers(len(instances)))]
        target = ReprojectionTarget(k.keypoints, k.visible, g.bbox)
        x0 = _gt_params(g).as_vector()
        x = x0 + np.concatenate([rng.normal(0, 0.3, 3), rng.normal(0, 0.15, 1), np.zeros(3)])
        x[4:] = x0[4:] * np.exp(rng.normal(0, 0.1, 3))
        try:
            params = PoseParams.from_vector(x)
            if not is_non_kink(intr, tpl, params, target, step=GRAD_STEP):
                continue
            analytic = reprojection_loss(intr, tpl, params, target).grad
            numeric = numeric_gradient(
                lambda v: reprojection_loss(intr, tpl, PoseParams.from_vector(v), target, with_grad=False).value,
                x, GRAD_STEP)
        except (KpliftError, ValueError):
            continue
        err = gradient_relative_error(analytic, numeric)
        i = int(np.argmax(err))
        if err[i] > max_err:
            max_err, where = float(err[i]), (PARAM_NAMES[i], float(analytic[i]), float(numeric[i]))
        done += 1
    print(f"gradient audit: {done} points, max relative error {max_err:.3e}")
    if max_err >= GRAD_TOL:
        name, a, n = where
        _err(f"gradient audit failed at {name}: analytic {a:.9g} vs numeric {n:.9g}")
        return EXIT_CHECK
    return EXIT_OK


# --- templates ----------------------------------------------------------------

def cmd_templates(action: str, path) -> int:
    tpls = _templates(path)
    if action == "validate":
        print(f"{path or 'builtin'}: {len(tpls)} templates valid")
    else:
        print(templates_to_json(tpls), end="")
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kplift", description="Keypoint-based monocular 3D detection toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic scene dump")
    s.add_argument("--config", type=Path, help="run configuration JSON (defaults apply when omitted)")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--threads", type=int, default=1)

    s = sub.add_parser("lift", help="lift Detection2D records to KITTI result files")
    s.add_argument("--det", type=Path, required=True, help="directory of %%06d.jsonl detection records")
    s.add_argument("--calib", type=Path, required=True, help="KITTI calibration file")
    s.add_argument("--templates", type=Path)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--image-size", type=float, nargs=2, metavar=("W", "H"), default=KITTI_IMAGE_SIZE)
    s.add_argument("--threads", type=int, default=1)

    s = sub.add_parser("eval", help="score KITTI result files against labels")
    s.add_argument("--gt", type=Path, required=True)
    s.add_argument("--det", type=Path, required=True)
    s.add_argument("--calib", type=Path, required=True, help="calibration file or directory of per-frame files")
    s.add_argument("--config", type=Path)
    s.add_argument("--out", type=Path)
    s.add_argument("--format", default="csv,json", help="comma-separated subset of csv,json")
    s.add_argument("--interpolation", type=int, choices=(11, 40))
    s.add_argument("--svg", action="store_true", help="also write precision-recall SVG plots")
    s.add_argument("--threads", type=int, default=1)

    s = sub.add_parser("losscheck", help="loss values at ground truth and gradient audit")
    s.add_argument("--scene", type=Path, required=True)
    s.add_argument("--templates", type=Path)
    s.add_argument("--n-samples", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("templates", help="validate or print a template file")
    s.add_argument("action", choices=("validate", "show"))
    s.add_argument("path", type=Path, nargs="?")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_run_config(args.config) if getattr(args, "config", None) else RunConfig()
        if args.command == "synth":
            cmd_synth(cfg, args.out, args.threads)
        elif args.command == "lift":
            cmd_lift(args.det, args.calib, args.templates, args.out, tuple(args.image_size), args.threads)
        elif args.command == "eval":
            formats = tuple(f.strip() for f in args.format.split(",") if f.strip())
            bad = set(formats) - {"csv", "json"}
            if bad:
                raise InputError(f"unknown format(s): {', '.join(sorted(bad))}")
            if args.interpolation:
                cfg = replace(cfg, eval=replace(cfg.eval, n_points=args.interpolation))
            cmd_eval(args.gt, args.det, args.calib, cfg, args.out, formats, args.svg, args.threads)
        elif args.command == "losscheck":
            return cmd_losscheck(args.scene, args.templates, args.n_samples, args.seed)
        elif args.command == "templates":
            return cmd_templates(args.action, args.path)
    except (ConfigError, InputError, KpliftError) as exc:
        _err(str(exc))
        return EXIT_INPUT
    except FileNotFoundError as exc:
        _err(f"{exc.filename}: no such file")
        return EXIT_INPUT
    except OSError as exc:
        _err(f"IO error: {exc}")
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
