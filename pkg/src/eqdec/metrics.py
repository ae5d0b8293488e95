"""Detection metrics and training diagnostics.

Average precision follows the standard ranked protocol: predictions are
sorted by score across the whole dataset, greedily matched per image to
unmatched ground truth of the same class at an IoU threshold, and the
area under the precision envelope of the resulting PR curve is taken
(all-point interpolation). No NMS is applied; every thresholded
prediction enters the ranking.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import iou_matrix

__all__ = [
    "Detections",
    "MetricsRecord",
    "average_precision",
    "grad_norm",
    "write_metrics_csv",
]

SCORE_THRESHOLD = 0.05
IOU_GRID = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))


@dataclass
class Detections:
    """Predictions and ground truth for one image."""

    boxes: np.ndarray  # (P, 4) corners
    scores: np.ndarray  # (P,)
    classes: np.ndarray  # (P,) int
    gt_boxes: np.ndarray  # (M, 4)
    gt_classes: np.ndarray  # (M,) int

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 4)
        self.gt_classes = np.asarray(self.gt_classes, dtype=np.int64).reshape(-1)
        if not len(self.boxes) == len(self.scores) == len(self.classes):
            raise ValueError("prediction arrays disagree on length")
        if len(self.gt_boxes) != len(self.gt_classes):
            raise ValueError("ground-truth arrays disagree on length")


def _ap_from_flags(flags: np.ndarray, num_gt: int) -> float:
    """Area under the PR curve for score-ranked TP/FP flags."""
    if num_gt == 0:
        return math.nan
    if len(flags) == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[1.0], precision])
    # precision envelope: best precision at any recall >= r
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum(np.diff(mrec) * mpre[1:]))


def _class_flags(dets: Sequence[Detections], cls: int, thr: float):
    """Score-ranked TP/FP flags for one class at one IoU threshold."""
    order = []
    for img, d in enumerate(dets):
        for p in np.nonzero(d.classes == cls)[0]:
            order.append((float(d.scores[p]), img, int(p)))
    order.sort(key=lambda t: -t[0])
    matched = {img: np.zeros(len(d.gt_boxes), dtype=bool) for img, d in enumerate(dets)}
    flags = np.zeros(len(order), dtype=bool)
    for i, (_, img, p) in enumerate(order):
        d = dets[img]
        cand = np.nonzero((d.gt_classes == cls) & ~matched[img])[0]
        if len(cand) == 0:
            continue
        ious = iou_matrix(d.boxes[p : p + 1], d.gt_boxes[cand])[0]
        j = int(np.argmax(ious))
        if ious[j] >= thr:
            matched[img][cand[j]] = True
            flags[i] = True
    num_gt = sum(int(np.sum(d.gt_classes == cls)) for d in dets)
    return flags, num_gt


def average_precision(dets: Sequence[Detections], thresholds=IOU_GRID):
    """Mean AP over classes with ground truth, per IoU threshold.

    Returns (ap50, ap) where ap averages over the threshold grid.
    """
    classes = sorted(
        {int(c) for d in dets for c in d.gt_classes}
        | {int(c) for d in dets for c in d.classes}
    )
    per_thr = []
    for thr in thresholds:
        vals = []
        for cls in classes:
            flags, num_gt = _class_flags(dets, cls, thr)
            ap = _ap_from_flags(flags, num_gt)
            if not math.isnan(ap):
                vals.append(ap)
        per_thr.append(float(np.mean(vals)) if vals else 0.0)
    ap50 = per_thr[thresholds.index(0.5)] if 0.5 in thresholds else per_thr[0]
    return ap50, float(np.mean(per_thr))


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    """L2 norm of all gradients flattened into one vector."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g) ** 2))
    return math.sqrt(total)


@dataclass
class MetricsRecord:
    """One logged training step; all values must be finite."""

    step: int
    total: float
    focal: float
    l1: float
    giou: float
    grad_norm: float
    position_losses: tuple[float, ...] = ()
    residuals: tuple[float, ...] = ()
    tape_nodes: int = 0
    refine_apps: int = 0
    ap50: float = math.nan
    ap: float = math.nan

    def finite(self) -> bool:
        core = (self.total, self.focal, self.l1, self.giou, self.grad_norm)
        return (
            all(math.isfinite(v) for v in core)
            and all(math.isfinite(v) for v in self.position_losses)
            and all(math.isfinite(v) for v in self.residuals)
        )


CSV_COLUMNS = (
    "step", "total", "focal", "l1", "giou", "grad_norm",
    "position_losses", "residual_last", "tape_nodes", "refine_apps",
    "ap50", "ap",
)


def write_metrics_csv(path, records: Iterable[MetricsRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([
                r.step,
                f"{r.total:.12g}",
                f"{r.focal:.12g}",
                f"{r.l1:.12g}",
                f"{r.giou:.12g}",
                f"{r.grad_norm:.12g}",
                "|".join(f"{v:.12g}" for v in r.position_losses),
                f"{r.residuals[-1]:.12g}" if r.residuals else "",
                r.tape_nodes,
                r.refine_apps,
                "" if math.isnan(r.ap50) else f"{r.ap50:.12g}",
                "" if math.isnan(r.ap) else f"{r.ap:.12g}",
            ])
