"""Non-maximum suppression and COCO-style average precision."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import pairwise_iou

REPORT_THRESHOLDS = (0.5, 0.6, 0.7, 0.75, 0.8, 0.9)
COCO_THRESHOLDS = tuple(float(t) for t in np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
IOU_BUCKETS = (0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


class InputError(ValueError):
    pass


@dataclass
class Detections:
    """Detections of one image as parallel arrays."""

    boxes: np.ndarray   # (n, 4)
    scores: np.ndarray  # (n,)
    labels: np.ndarray  # (n,)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)

    def __len__(self):
        return len(self.scores)

    def take(self, idx) -> "Detections":
        return Detections(self.boxes[idx], self.scores[idx], self.labels[idx])

    @classmethod
    def from_list(cls, dets) -> "Detections":
        if not dets:
            return cls(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))
        return cls([d.box for d in dets], [d.score for d in dets], [d.label for d in dets])

    def to_list(self):
        from .detector import Detection
        return [Detection(int(l), float(s), tuple(float(v) for v in b))
                for b, s, l in zip(self.boxes, self.scores, self.labels)]


def nms(dets: Detections, iou_thresh=0.6) -> np.ndarray:
    """Greedy class-wise NMS. Returns kept indices in descending score order.

    Equal scores are visited in index order.
    """
    order = np.argsort(-dets.scores, kind="stable")
    boxes = dets.boxes
    labels = dets.labels
    areas = np.clip(boxes[:, 2] - boxes[:, 0], 0, None) * np.clip(boxes[:, 3] - boxes[:, 1], 0, None)
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        iw = np.clip(np.minimum(boxes[i, 2], boxes[rest, 2]) - np.maximum(boxes[i, 0], boxes[rest, 0]), 0, None)
        ih = np.clip(np.minimum(boxes[i, 3], boxes[rest, 3]) - np.maximum(boxes[i, 1], boxes[rest, 1]), 0, None)
        inter = iw * ih
        union = areas[i] + areas[rest] - inter
        ovr = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        order = rest[(ovr <= iou_thresh) | (labels[rest] != labels[i])]
    return np.asarray(keep, dtype=np.int64)


def precision_recall(scores, matched, n_gt):
    """Cumulative precision/recall for detections already sorted by score."""
    tp = np.cumsum(np.asarray(matched, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(matched, dtype=np.float64))
    recall = tp / n_gt if n_gt else np.zeros_like(tp)
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return precision, recall


def interpolated_ap(precision, recall) -> float:
    """101-point interpolated AP (precision envelope read at recall 0, 0.01, ..., 1)."""
    if len(precision) == 0:
        return 0.0
    env = np.maximum.accumulate(np.asarray(precision)[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(env), env[np.minimum(idx, len(env) - 1)], 0.0)
    return float(q.mean())


def match_detections(dets_per_image, gts, label, iou_thresh):
    """Greedy score-ordered matching for one class. Returns (scores, matched flags, n_gt).

    Each detection takes the highest-IoU still-unmatched object of its image
    when that IoU reaches ``iou_thresh``.
    """
    items = []
    for img, d in enumerate(dets_per_image):
        for n in np.nonzero(d.labels == label)[0]:
            items.append((-d.scores[n], img, n))
    items.sort()
    gt_boxes = [np.asarray(g.boxes)[np.asarray(g.classes) == label] for g in gts]
    n_gt = sum(len(b) for b in gt_boxes)
    used = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
    ious = [pairwise_iou(d.boxes, gb) if len(gb) else None for d, gb in zip(dets_per_image, gt_boxes)]
    scores = np.empty(len(items))
    matched = np.zeros(len(items), dtype=bool)
    for m, (neg_score, img, n) in enumerate(items):
        scores[m] = -neg_score
        if ious[img] is None:
            continue
        cand = np.where(used[img], -1.0, ious[img][n])
        best = int(np.argmax(cand))
        if cand[best] >= iou_thresh:
            used[img][best] = True
            matched[m] = True
    return scores, matched, n_gt


@dataclass
class EvalReport:
    ap: dict                     # threshold -> AP averaged over classes with objects
    per_class: dict              # threshold -> list of per-class AP (nan if class absent)
    mean_ap: float               # average over 0.50:0.05:0.95
    bucket_counts: dict = field(default_factory=dict)  # "lo-hi" -> detection count

    def to_dict(self):
        return {
            "mean_ap": self.mean_ap,
            "ap": {f"{t:.2f}": v for t, v in self.ap.items()},
            "per_class": {f"{t:.2f}": [None if np.isnan(x) else x for x in v] for t, v in self.per_class.items()},
            "bucket_counts": self.bucket_counts,
        }


def iou_bucket_counts(boxes_per_image, labels_per_image, gts, same_class=True) -> dict:
    """Count boxes by their best IoU with a ground-truth object, in 0.1 buckets from 0.5."""
    counts = np.zeros(len(IOU_BUCKETS) - 1, dtype=np.int64)
    for boxes, labels, gt in zip(boxes_per_image, labels_per_image, gts):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if len(gt) == 0 or len(boxes) == 0:
            continue
        ious = pairwise_iou(boxes, gt.boxes)
        if same_class:
            ious = np.where(np.asarray(labels)[:, None] == np.asarray(gt.classes)[None, :], ious, 0.0)
        best = ious.max(axis=1)
        idx = np.searchsorted(IOU_BUCKETS, best, side="right") - 1
        idx = np.minimum(idx, len(counts) - 1)  # IoU == 1.0 lands in the top bucket
        valid = best >= IOU_BUCKETS[0]
        np.add.at(counts, idx[valid], 1)
    return {f"{lo:.1f}-{hi:.1f}": int(c) for lo, hi, c in zip(IOU_BUCKETS[:-1], IOU_BUCKETS[1:], counts)}


def evaluate(dets_per_image, gts, num_classes: int, thresholds=None) -> EvalReport:
    if len(dets_per_image) != len(gts):
        raise InputError(f"{len(dets_per_image)} detection sets for {len(gts)} images")
    thresholds = sorted(set(REPORT_THRESHOLDS) | set(COCO_THRESHOLDS) | set(thresholds or ()))
    ap, per_class = {}, {}
    for t in thresholds:
        vals = []
        for c in range(num_classes):
            scores, matched, n_gt = match_detections(dets_per_image, gts, c, t)
            if n_gt == 0:
                vals.append(float("nan"))
                continue
            prec, rec = precision_recall(scores, matched, n_gt)
            vals.append(interpolated_ap(prec, rec))
        per_class[t] = vals
        present = [v for v in vals if not np.isnan(v)]
        ap[t] = float(np.mean(present)) if present else 0.0
    mean_ap = float(np.mean([ap[t] for t in COCO_THRESHOLDS]))
    buckets = iou_bucket_counts([d.boxes for d in dets_per_image], [d.labels for d in dets_per_image], gts)
    return EvalReport({t: ap[t] for t in thresholds}, per_class, mean_ap, buckets)
