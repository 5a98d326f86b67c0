"""COCO-style mean average precision with small/medium/large buckets.

Matching, ignore rules and 101-point interpolation follow the COCO toolkit.
Two deliberate differences: the detection cap applies per image across all
classes, and a class with no ground truth but with surviving detections
scores AP 0 instead of being skipped.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .boxgeom import DEFAULT_THRESHOLDS, SizeBucket, areas, as_array, iou_matrix
from .errors import ConfigError, MismatchedImageIds
from .nms import DetectionSet, descending_order

COCO_IOUS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
# exact k / 100; linspace rounds some points up and skips recalls like 7 / 10
RECALL_POINTS = np.arange(101) / 100.0
BUCKETS = ("all", "small", "medium", "large")


@dataclass
class EvalConfig:
    iou_thresholds: Sequence[float] = COCO_IOUS
    use_buckets: bool = True
    max_dets: int = 100
    classes: Sequence[int] = (0, 1, 2, 3)
    area_thresholds: Tuple[float, float] = DEFAULT_THRESHOLDS

    def __post_init__(self):
        thr = np.asarray(self.iou_thresholds, dtype=float)
        if len(thr) == 0 or np.any(np.diff(thr) <= 0) or np.any(thr <= 0) or np.any(thr > 1):
            raise ConfigError("iou_thresholds must be strictly increasing within (0, 1]")
        if self.max_dets < 1:
            raise ConfigError("max_dets must be >= 1")

    def area_range(self, name: str) -> Tuple[float, float]:
        small, medium = self.area_thresholds
        return {
            "all": (0.0, np.inf),
            "small": (0.0, small),
            "medium": (small, medium),
            "large": (medium, np.inf),
        }[name]


@dataclass
class GroundTruth:
    boxes: np.ndarray
    class_ids: np.ndarray

    def __post_init__(self):
        self.boxes = as_array(self.boxes)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)


def match_detections(
    det_boxes: np.ndarray,
    gt_boxes: np.ndarray,
    iou_thr: float,
    gt_ignore: Optional[np.ndarray] = None,
    ious: Optional[np.ndarray] = None,
):
    """Greedy single-class matching of confidence-sorted detections.

    Each detection takes the unmatched ground-truth box with the highest IoU
    at or above ``iou_thr``; non-ignored boxes are preferred over ignored
    ones. Returns ``(det_match, gt_matched)`` where ``det_match[i]`` is the
    matched GT index or -1.
    """
    n_det = len(det_boxes)
    n_gt = len(gt_boxes)
    det_match = np.full(n_det, -1, dtype=np.int64)
    gt_matched = np.zeros(n_gt, dtype=bool)
    if n_det == 0 or n_gt == 0:
        return det_match, gt_matched
    if ious is None:
        ious = iou_matrix(det_boxes, gt_boxes)
    ignore = np.zeros(n_gt, dtype=bool) if gt_ignore is None else np.asarray(gt_ignore, dtype=bool)
    # non-ignored ground truth first, as the COCO toolkit does
    gt_order = np.concatenate([np.flatnonzero(~ignore), np.flatnonzero(ignore)]).tolist()
    ign = ignore.tolist()
    rows = ious.tolist()
    used = [False] * n_gt
    start = min(iou_thr, 1 - 1e-10)
    for d in range(n_det):
        best = start
        m = -1
        row = rows[d]
        for g in gt_order:
            if used[g]:
                continue
            if m > -1 and not ign[m] and ign[g]:
                break
            if row[g] < best:
                continue
            best = row[g]
            m = g
        if m > -1:
            used[m] = True
            det_match[d] = m
    gt_matched[:] = used
    return det_match, gt_matched


def average_precision(flags, confidences, n_gt: int) -> Optional[float]:
    """101-point interpolated AP.

    ``flags`` marks true positives. Returns ``None`` when there is neither
    ground truth nor any detection, and 0.0 for detections without ground truth.
    """
    flags = np.asarray(flags, dtype=bool)
    if n_gt == 0:
        return None if len(flags) == 0 else 0.0
    if len(flags) == 0:
        return 0.0
    order = descending_order(np.asarray(confidences, dtype=float))
    return float(_interp_precision(flags[order], n_gt).mean())


def _interp_precision(sorted_flags: np.ndarray, n_gt: int) -> np.ndarray:
    tp = np.cumsum(sorted_flags)
    fp = np.cumsum(~sorted_flags)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, np.finfo(float).eps)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    out = np.zeros(len(RECALL_POINTS))
    ok = idx < len(recall)
    out[ok] = envelope[idx[ok]]
    return out


@dataclass
class EvalReport:
    iou_thresholds: List[float]
    classes: List[int]
    # ap[bucket][class][k] for threshold k; None where undefined
    ap: Dict[str, Dict[int, List[Optional[float]]]]
    map: Dict[str, Optional[float]]
    map50: Dict[str, Optional[float]]
    counts: Dict[str, Dict[str, int]]
    pr_curves: Dict[int, List[float]] = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "iou_thresholds": self.iou_thresholds,
            "classes": self.classes,
            "map": self.map,
            "map50": self.map50,
            "counts": self.counts,
            "ap": {b: {str(c): v for c, v in per.items()} for b, per in self.ap.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        fmt = lambda v: "   -  " if v is None else f"{v:6.4f}"
        lines = [f"{'bucket':<8} {'mAP':>7} {'mAP@.5':>7} {'TP':>6} {'FP':>6} {'FN':>6}"]
        for b in self.map:
            c = self.counts.get(b, {})
            lines.append(
                f"{b:<8} {fmt(self.map[b]):>7} {fmt(self.map50[b]):>7} "
                f"{c.get('tp', 0):>6} {c.get('fp', 0):>6} {c.get('fn', 0):>6}"
            )
        return "\n".join(lines) + "\n"

    def pr_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_id", "recall", "precision"])
        for c, prec in self.pr_curves.items():
            for r, p in zip(RECALL_POINTS, prec):
                w.writerow([c, f"{r:.2f}", f"{p:.6f}"])
        return buf.getvalue()


def _mean(values) -> Optional[float]:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate(
    dets: Mapping[Hashable, DetectionSet],
    gts: Mapping[Hashable, GroundTruth],
    cfg: EvalConfig = EvalConfig(),
) -> EvalReport:
    """mAP over classes and IoU thresholds, overall and per size bucket.

    Inside a bucket, ground truth outside the bucket is ignored, detections
    matched to ignored ground truth are neither TP nor FP, and unmatched
    detections whose own area lies outside the bucket are dropped.
    """
    if set(dets) != set(gts):
        missing = sorted(map(str, set(dets) ^ set(gts)))
        raise MismatchedImageIds(f"detections and ground truth cover different images: {missing[:5]}")
    thresholds = [float(t) for t in cfg.iou_thresholds]
    buckets = BUCKETS if cfg.use_buckets else ("all",)
    classes = list(cfg.classes)
    T = len(thresholds)

    # per (bucket, class, thr): list of (score, tp) plus gt count
    scored = {b: {c: [[] for _ in range(T)] for c in classes} for b in buckets}
    n_gt = {b: {c: 0 for c in classes} for b in buckets}
    counts = {b: {"tp": 0, "fp": 0, "fn": 0, "gt": 0} for b in buckets}

    for img in sorted(dets, key=str):
        d = dets[img].top(cfg.max_dets)
        g = gts[img]
        d_area = areas(d.boxes)
        g_area = areas(g.boxes)
        for c in classes:
            dsel = d.class_ids == c
            gsel = g.class_ids == c
            db, ds, da = d.boxes[dsel], d.scores[dsel], d_area[dsel]
            gb, ga = g.boxes[gsel], g_area[gsel]
            ious = iou_matrix(db, gb) if len(db) and len(gb) else None
            for b in buckets:
                lo, hi = cfg.area_range(b)
                ign = (ga < lo) | (ga >= hi)
                n_gt[b][c] += int(np.sum(~ign))
                det_out = (da < lo) | (da >= hi)
                for k, thr in enumerate(thresholds):
                    match, gmatched = match_detections(db, gb, thr, ign, ious)
                    matched = match > -1
                    dropped = np.where(matched, ign[np.clip(match, 0, None)] if len(gb) else False, det_out)
                    keep = ~dropped
                    tp = matched & keep
                    scored[b][c][k].append((ds[keep], tp[keep]))
                    if k == 0:
                        counts[b]["tp"] += int(tp.sum())
                        counts[b]["fp"] += int((keep & ~matched).sum())
                        counts[b]["fn"] += int(np.sum(~ign & ~gmatched))
                        counts[b]["gt"] += int(np.sum(~ign))

    ap: Dict[str, Dict[int, List[Optional[float]]]] = {}
    pr_curves: Dict[int, List[float]] = {}
    for b in buckets:
        ap[b] = {}
        for c in classes:
            row = []
            for k in range(T):
                parts = scored[b][c][k]
                s = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0)
                f = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, dtype=bool)
                row.append(average_precision(f, s, n_gt[b][c]))
                if b == "all" and k == 0:
                    if n_gt[b][c] and len(f):
                        pr_curves[c] = _interp_precision(f[descending_order(s)], n_gt[b][c]).tolist()
                    else:
                        pr_curves[c] = [0.0] * len(RECALL_POINTS)
            ap[b][c] = row
    k50 = thresholds.index(0.5) if 0.5 in thresholds else None
    maps = {b: _mean(v for c in classes for v in ap[b][c]) for b in buckets}
    map50 = {b: (_mean(ap[b][c][k50] for c in classes) if k50 is not None else None) for b in buckets}
    return EvalReport(thresholds, classes, ap, maps, map50, counts, pr_curves)


def ground_truth_from_scenes(scenes) -> Dict[Hashable, GroundTruth]:
    return {s.image_id: GroundTruth(s.boxes, s.class_ids) for s in scenes}
