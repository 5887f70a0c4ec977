"""KITTI-protocol 3D detection scoring.

Detections are matched greedily by 3D IoU in descending score order.
Ground truths outside the current difficulty bucket (or of a neighbouring
class) are kept in the matching pool but flagged as ignored: a detection
that claims one is neither a true nor a false positive.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from kplift.errors import EmptyGroundTruth, MalformedLine, MissingFrame, NoMatches
from kplift.geometry3d import Box3D, iou3d
from kplift.kitti import KittiLabel, parse_calib, parse_label_file


@dataclass(frozen=True)
class DifficultyBucket:
    name: str
    min_box_height_px: float
    max_occlusion: int
    max_truncation: float


EASY = DifficultyBucket("easy", 40.0, 0, 0.15)
MODERATE = DifficultyBucket("moderate", 25.0, 1, 0.30)
HARD = DifficultyBucket("hard", 25.0, 2, 0.50)
DEFAULT_BUCKETS = (EASY, MODERATE, HARD)


def bucket_filter(gt: KittiLabel, bucket: DifficultyBucket) -> bool:
    return (gt.box_height >= bucket.min_box_height_px
            and gt.occluded <= bucket.max_occlusion
            and gt.truncated <= bucket.max_truncation)


@dataclass
class Matching:
    tp: np.ndarray  # per detection, in input order
    fp: np.ndarray
    gt_matched: np.ndarray  # per gt
    det_to_gt: np.ndarray  # matched gt index or -1


def match_greedy(gts: Sequence[Box3D], dets: Sequence[Box3D], scores: Sequence[float], iou_thr: float,
                 gt_ignored: Sequence[bool] | None = None) -> Matching:
    n_det, n_gt = len(dets), len(gts)
    ignored = np.zeros(n_gt, dtype=bool) if gt_ignored is None else np.asarray(gt_ignored, dtype=bool)
    tp = np.zeros(n_det, dtype=bool)
    fp = np.zeros(n_det, dtype=bool)
    taken = np.zeros(n_gt, dtype=bool)
    det_to_gt = np.full(n_det, -1)
    order = sorted(range(n_det), key=lambda i: (-float(scores[i]), i))
    for i in order:
        best, best_iou = -1, -1.0
        for j in range(n_gt):
            if taken[j]:
                continue
            ov = iou3d(dets[i], gts[j])
            if ov > best_iou:
                best, best_iou = j, ov
        if best >= 0 and best_iou >= iou_thr:
            taken[best] = True
            det_to_gt[i] = best
            if not ignored[best]:
                tp[i] = True
        else:
            fp[i] = True
    return Matching(tp, fp, taken & ~ignored, det_to_gt)


def recall_levels(n_points: int) -> np.ndarray:
    if n_points == 11:
        return np.linspace(0.0, 1.0, 11)
    if n_points == 40:
        return np.linspace(1.0 / 40.0, 1.0, 40)
    raise ValueError("interpolation must use 11 or 40 recall points")


def precision_recall(tp_by_score: Sequence[bool], n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (recall, precision) along a score-sorted TP/FP sequence."""
    tp = np.asarray(tp_by_score, dtype=float)
    ctp = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1)
    return ctp / n_gt, ctp / ranks


def average_precision(tp_by_score: Sequence[bool], n_gt: int, n_points: int = 11) -> float:
    """Interpolated AP in percent.

    ``tp_by_score`` lists true (TP) / false (FP) flags of the scored
    detections sorted by descending confidence.
    """
    if n_gt <= 0:
        raise EmptyGroundTruth("average precision is undefined without ground truth")
    recall, precision = precision_recall(tp_by_score, n_gt)
    total = 0.0
    for r in recall_levels(n_points):
        mask = recall >= r - 1e-12
        total += float(precision[mask].max()) if np.any(mask) else 0.0
    return 100.0 * total / n_points


def wrapped_angle_error(a: float, b: float) -> float:
    d = abs(a - b) % (2.0 * math.pi)
    return min(d, 2.0 * math.pi - d)


def size_orientation_errors(pairs: Sequence[tuple[KittiLabel, KittiLabel]]) -> tuple[tuple[float, float, float], float]:
    """((h, w, l) MAE in meters, yaw MAE in radians) over (det, gt) pairs."""
    if not pairs:
        raise NoMatches("no matched detections")
    dd = np.array([[abs(d.dims_hwl[k] - g.dims_hwl[k]) for k in range(3)] for d, g in pairs])
    yaw = [wrapped_angle_error(d.rotation_y, g.rotation_y) for d, g in pairs]
    h, w, l = (float(v) for v in dd.mean(axis=0))
    return (h, w, l), float(np.mean(yaw))


@dataclass(frozen=True)
class EvalConfig:
    classes: tuple[str, ...] = ("Car",)
    neighbor_classes: dict = field(default_factory=lambda: {"Car": ("Van",)})
    iou_thresholds: tuple[float, ...] = (0.5, 0.7)
    buckets: tuple[DifficultyBucket, ...] = DEFAULT_BUCKETS
    n_points: int = 11
    mae_iou: float = 0.5
    mae_bucket: str = "hard"
    threads: int = 1


@dataclass
class EvalReport:
    ap3d: dict  # (class, bucket, iou) -> AP percent or None when no ground truth
    n_gt: dict
    size_mae: tuple[float, float, float] | None  # (h, w, l)
    orientation_mae: float | None
    n_matched: int
    pr_curves: dict = field(default_factory=dict)
    n_points: int = 11

    def rows(self) -> list[dict]:
        out = []
        for (cls, bucket, thr), ap in self.ap3d.items():
            out.append({"class": cls, "bucket": bucket, "iou_threshold": thr,
                        "ap3d": None if ap is None else round(ap, 6), "n_gt": self.n_gt[(cls, bucket)],
                        "interpolation": self.n_points})
        return out

    def to_json(self) -> str:
        doc = {
            "interpolation_points": self.n_points,
            "ap3d": self.rows(),
            "n_matched": self.n_matched,
            "pr_curves": {f"{c}/{b}/{t}": [[float(r), float(p)] for r, p in curve]
                          for (c, b, t), curve in self.pr_curves.items()},
        }
        if self.size_mae is not None:
            h, w, l = self.size_mae
            doc["size_mae"] = {"height": h, "width": w, "length": l}
        if self.orientation_mae is not None:
            doc["orientation_mae"] = self.orientation_mae
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["class", "bucket", "iou_threshold", "ap3d", "n_gt", "interpolation"],
                                lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
        return buf.getvalue()

    def table(self) -> str:
        """Human-readable AP table (IoU x difficulty) followed by the error table."""
        lines = []
        classes = sorted({k[0] for k in self.ap3d})
        buckets = list(dict.fromkeys(k[1] for k in self.ap3d))
        thrs = sorted({k[2] for k in self.ap3d})
        head = "".join(f"{f'IoU = {t}':^{10 * len(buckets)}}" for t in thrs)
        sub = "".join(f"{b:>10}" for _ in thrs for b in buckets)
        for cls in classes:
            lines.append(f"AP3D ({self.n_points}-point)  {cls}")
            lines.append(" " * 10 + head)
            lines.append(" " * 10 + sub)
            cells = []
            for t in thrs:
                for b in buckets:
                    ap = self.ap3d[(cls, b, t)]
                    cells.append(f"{'-' if ap is None else f'{ap:.2f}':>10}")
            lines.append(f"{cls:<10}" + "".join(cells))
        lines.append("")
        lines.append(f"{'':<10}{'height':>10}{'width':>10}{'length':>10}{'orient':>10}")
        if self.size_mae is None:
            lines.append(f"{'MAE':<10}" + f"{'-':>10}" * 4)
        else:
            h, w, l = self.size_mae
            lines.append(f"{'MAE':<10}{h:>10.3f}{w:>10.3f}{l:>10.3f}{self.orientation_mae:>10.3f}")
        return "\n".join(lines) + "\n"


@dataclass
class _Frame:
    frame_id: str
    gts: list[KittiLabel]
    dets: list[KittiLabel]


def _frame_stats(fr: _Frame, cls: str, bucket: DifficultyBucket, thr: float, neighbors: Sequence[str]):
    """Scored TP/FP records and matched (det, gt) pairs for one frame."""
    pool = [g for g in fr.gts if g.type == cls or g.type in neighbors]
    care = [g.type == cls and bucket_filter(g, bucket) for g in pool]
    dets = [d for d in fr.dets if d.type == cls]
    m = match_greedy([g.box3d() for g in pool], [d.box3d() for d in dets],
                     [d.score for d in dets], thr, [not c for c in care])
    records = []
    pairs = []
    for i, d in enumerate(dets):
        if m.tp[i]:
            records.append((d.score, fr.frame_id, i, True))
            pairs.append((d, pool[m.det_to_gt[i]]))
        elif m.fp[i]:
            records.append((d.score, fr.frame_id, i, False))
    return records, sum(care), pairs


def evaluate_frames(frames: Sequence[_Frame], config: EvalConfig = EvalConfig()) -> EvalReport:
    frames = sorted(frames, key=lambda f: f.frame_id)
    ap3d, n_gt_map, curves = {}, {}, {}
    pairs_for_mae = []
    jobs = [(cls, b, t) for cls in config.classes for b in config.buckets for t in config.iou_thresholds]

    def run(job):
        cls, bucket, thr = job
        neighbors = config.neighbor_classes.get(cls, ())
        records, n_gt, pairs = [], 0, []
        for fr in frames:
            r, n, p = _frame_stats(fr, cls, bucket, thr, neighbors)
            records += r
            n_gt += n
            pairs += p
        records.sort(key=lambda r: (-r[0], r[1], r[2]))
        return records, n_gt, pairs

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    for (cls, bucket, thr), (records, n_gt, pairs) in zip(jobs, results):
        flags = [r[3] for r in records]
        n_gt_map[(cls, bucket.name)] = n_gt
        if n_gt == 0:
            ap3d[(cls, bucket.name, thr)] = None
            continue
        ap3d[(cls, bucket.name, thr)] = average_precision(flags, n_gt, config.n_points)
        rec, prec = precision_recall(flags, n_gt)
        curves[(cls, bucket.name, thr)] = list(zip(rec.tolist(), prec.tolist()))
        if bucket.name == config.mae_bucket and math.isclose(thr, config.mae_iou):
            pairs_for_mae += pairs

    try:
        size_mae, orient_mae = size_orientation_errors(pairs_for_mae)
    except NoMatches:
        size_mae, orient_mae = None, None
    return EvalReport(ap3d, n_gt_map, size_mae, orient_mae, len(pairs_for_mae), curves, config.n_points)


def _resolve_calib(calib_dir: Path, frame_id: str) -> Path:
    if calib_dir.is_file():
        return calib_dir
    for cand in (calib_dir / f"{frame_id}.txt", calib_dir / "calib.txt"):
        if cand.is_file():
            return cand
    raise MissingFrame(frame_id, str(calib_dir / f"{frame_id}.txt"))


def load_frames(gt_dir, det_dir, calib_dir) -> list[_Frame]:
    """Read aligned gt/detection/calibration files.

    Frames are enumerated from ``gt_dir``. A completely empty ``det_dir``
    means no detections anywhere; otherwise every frame needs a result file.
    """
    gt_dir, det_dir, calib_dir = Path(gt_dir), Path(det_dir), Path(calib_dir)
    gt_files = sorted(gt_dir.glob("*.txt"))
    det_present = det_dir.is_dir() and any(det_dir.glob("*.txt"))
    frames = []
    for gf in gt_files:
        fid = gf.stem
        parse_calib(_resolve_calib(calib_dir, fid).read_text(encoding="utf-8"))
        df = det_dir / gf.name
        if det_present and not df.is_file():
            raise MissingFrame(fid, str(df))
        dets = parse_label_file(df.read_text(encoding="utf-8")) if df.is_file() else []
        for i, d in enumerate(dets, start=1):
            if d.score is None:
                raise MalformedLine(i, f"{df}: result lines need a score")
        frames.append(_Frame(fid, parse_label_file(gf.read_text(encoding="utf-8")), dets))
    return frames


def evaluate(gt_dir, det_dir, calib_dir, config: EvalConfig = EvalConfig()) -> EvalReport:
    return evaluate_frames(load_frames(gt_dir, det_dir, calib_dir), config)


def write_pr_svgs(report: EvalReport, out_dir) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for (cls, bucket, thr), curve in sorted(report.pr_curves.items()):
        fig, ax = plt.subplots(figsize=(4, 3))
        if curve:
            r, p = zip(*curve)
            ax.step(r, p, where="post")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_title(f"{cls} {bucket} IoU={thr}")
        path = out / f"pr_{cls}_{bucket}_{thr}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(path)
    return paths
