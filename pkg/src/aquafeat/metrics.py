"""Single-class detection metrics and a throughput benchmark.

AP uses COCO-style 101-point interpolation over a dataset-pooled PR curve.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_LEVELS = np.arange(101) / 100.0  # exactly i/100, so recall k/n hits its level
INTERPOLATION = "coco101"


class BoundingBox(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_corners(cls, x0, y0, x1, y1) -> "BoundingBox":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    confidence: float
    class_id: int = 0

    def format(self) -> str:
        b = self.box
        return f"{self.class_id} {self.confidence:.6f} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}"


def iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def as_box(obj) -> BoundingBox:
    if isinstance(obj, BoundingBox):
        return obj
    if isinstance(obj, Detection):
        return obj.box
    return BoundingBox(obj.cx, obj.cy, obj.w, obj.h)


# ---------------------------------------------------------------- matching


@dataclass
class MatchResult:
    confidences: np.ndarray  # per detection, in match order
    true_positive: np.ndarray  # bool
    matched_gt: list  # gt index or None
    num_gt: int

    @classmethod
    def concat(cls, parts: Sequence["MatchResult"]) -> "MatchResult":
        """Pool per-image results and re-sort by descending confidence (stable)."""
        if not parts:
            return cls(np.zeros(0), np.zeros(0, bool), [], 0)
        conf = np.concatenate([p.confidences for p in parts])
        tp = np.concatenate([p.true_positive for p in parts])
        matched = [m for p in parts for m in p.matched_gt]
        order = np.argsort(-conf, kind="stable")
        return cls(conf[order], tp[order], [matched[i] for i in order], sum(p.num_gt for p in parts))


def match_detections(dets: Sequence[Detection], gts: Sequence, iou_threshold: float) -> MatchResult:
    """Greedy matching in descending-confidence order.

    Each detection takes the highest-IoU ground truth not yet taken, if that
    IoU reaches the threshold; ties go to the lower GT index.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    gt_boxes = [as_box(g) for g in gts]
    taken = [False] * len(gt_boxes)
    conf, flags, matched = [], [], []
    for i in order:
        d = dets[i]
        best, best_iou = None, iou_threshold
        for j, g in enumerate(gt_boxes):
            if taken[j]:
                continue
            o = iou(d.box, g)
            if o >= best_iou and (best is None or o > best_iou):
                best, best_iou = j, o
        if best is not None:
            taken[best] = True
        conf.append(d.confidence)
        flags.append(best is not None)
        matched.append(best)
    return MatchResult(np.asarray(conf, dtype=np.float64), np.asarray(flags, dtype=bool), matched, len(gt_boxes))


def precision_recall(match: MatchResult) -> tuple[float, float]:
    tp = int(match.true_positive.sum())
    n_det = len(match.true_positive)
    precision = tp / n_det if n_det else 1.0
    recall = tp / match.num_gt if match.num_gt else 1.0
    return precision, recall


def average_precision(match: MatchResult) -> float:
    """101-point interpolated AP of a confidence-sorted match list."""
    if match.num_gt == 0 or len(match.true_positive) == 0:
        return 0.0
    tp = np.cumsum(match.true_positive)
    fp = np.cumsum(~match.true_positive)
    recall = tp / match.num_gt
    precision = tp / (tp + fp)
    # precision envelope: best precision at any recall >= current
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_LEVELS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def map_range(dets_per_image: Sequence[Sequence[Detection]], gts_per_image: Sequence[Sequence]) -> tuple[float, float, list[float]]:
    """Pooled single-class AP at IoU 0.5 and averaged over 0.50:0.95.

    Returns ``(map50, map50_95, per_threshold_aps)``.
    """
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truths must cover the same images")
    if not gts_per_image or sum(len(g) for g in gts_per_image) == 0:
        logger.warning("map_range: dataset has no ground truth boxes; reporting 0")
        return 0.0, 0.0, [0.0] * len(IOU_THRESHOLDS)
    aps = []
    for thr in IOU_THRESHOLDS:
        pooled = MatchResult.concat([match_detections(d, g, thr) for d, g in zip(dets_per_image, gts_per_image)])
        aps.append(average_precision(pooled))
    return aps[0], float(np.mean(aps)), aps


# ----------------------------------------------------------------- reports


@dataclass
class MetricReport:
    precision: float
    recall: float
    map50: float
    map50_95: float
    fps: float = float("nan")
    conf_threshold: float = 0.25
    num_images: int = 0
    num_gt: int = 0

    def as_pairs(self) -> list[tuple[str, str]]:
        return [
            ("map50", f"{self.map50:.6f}"),
            ("map50_95", f"{self.map50_95:.6f}"),
            ("precision", f"{self.precision:.6f}"),
            ("recall", f"{self.recall:.6f}"),
            ("fps", f"{self.fps:.3f}"),
            ("interpolation", INTERPOLATION),
            ("conf_threshold", f"{self.conf_threshold:g}"),
            ("images", str(self.num_images)),
            ("gt_boxes", str(self.num_gt)),
        ]

    def render(self) -> str:
        pairs = self.as_pairs()
        width = max(len(k) for k, _ in pairs)
        lines = [f"# detection report (AP interpolation: {INTERPOLATION}, P/R at conf > {self.conf_threshold:g})"]
        lines += [f"# {k.ljust(width)} | {v}" for k, v in pairs]
        lines += [f"{k}={v}" for k, v in pairs]
        return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line.startswith("#") or "=" not in line:
            continue
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def evaluate_detections(
    dets_per_image: Sequence[Sequence[Detection]],
    gts_per_image: Sequence[Sequence],
    conf_threshold: float = 0.25,
) -> MetricReport:
    """mAP over all supplied detections; P/R at ``conf_threshold`` and IoU 0.5."""
    map50, map50_95, _ = map_range(dets_per_image, gts_per_image)
    kept = [[d for d in dets if d.confidence > conf_threshold] for dets in dets_per_image]
    pooled = MatchResult.concat([match_detections(d, g, 0.5) for d, g in zip(kept, gts_per_image)])
    p, r = precision_recall(pooled)
    return MetricReport(p, r, map50, map50_95, conf_threshold=conf_threshold,
                        num_images=len(gts_per_image), num_gt=pooled.num_gt)


# --------------------------------------------------------------- benchmark


@dataclass
class FpsResult:
    mean_fps: float
    cv: float
    runs: list[float]
    iters: int
    low_confidence: bool

    def render(self) -> str:
        flag = " (low confidence: iters < 10)" if self.low_confidence else ""
        return f"fps={self.mean_fps:.3f}\nfps_cv={self.cv:.4f}\niters={self.iters}\nrepetitions={len(self.runs)}{flag}\n"


def fps_bench(pipeline: Callable[[], object], warmup: int = 5, iters: int = 100, repetitions: int = 5) -> FpsResult:
    """Time ``pipeline()`` calls: fps per repetition, then mean and CV."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    for _ in range(warmup):
        pipeline()
    runs = []
    for _ in range(repetitions):
        start = time.perf_counter()
        for _ in range(iters):
            pipeline()
        runs.append(iters / (time.perf_counter() - start))
    arr = np.asarray(runs)
    mean = float(arr.mean())
    cv = float(arr.std() / mean) if len(arr) > 1 else 0.0
    return FpsResult(mean, cv, runs, iters, low_confidence=iters < 10)
