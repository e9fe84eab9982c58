"""Per-location target assignment for the coarse and border stages."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import SIGMA, encode_offsets, iou, location_centers


@dataclass
class GroundTruth:
    """Objects of one image. ``classes`` are 0-based; ``extremes`` is (n, 4, 2) in (L, T, R, B) order."""

    classes: np.ndarray
    boxes: np.ndarray
    extremes: np.ndarray

    def __len__(self):
        return len(self.classes)

    @classmethod
    def empty(cls):
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 4)), np.zeros((0, 4, 2)))


@dataclass
class BorderTargets:
    labels: np.ndarray   # (b, h, w), 0 = background, else class + 1
    offsets: np.ndarray  # (b, 4, h, w), zero at background
    gt_index: np.ndarray  # (b, h, w), matched object or -1


def assign_coarse_targets(gts, height: int, width: int, stride: int):
    """Label each cell by the smallest-area box strictly containing its center.

    Returns (labels (b, h, w), distances (b, 4, h, w) as l, t, r, b in pixels,
    gt_index (b, h, w)). Equal areas go to the lower object index.
    """
    nb = len(gts)
    labels = np.zeros((nb, height, width), dtype=np.int64)
    dist = np.zeros((nb, 4, height, width))
    index = np.full((nb, height, width), -1, dtype=np.int64)
    cx, cy = location_centers(height, width, stride)
    for b, gt in enumerate(gts):
        if len(gt) == 0:
            continue
        bx = np.asarray(gt.boxes, dtype=np.float64)
        d = np.stack([cx[..., None] - bx[:, 0], cy[..., None] - bx[:, 1],
                      bx[:, 2] - cx[..., None], bx[:, 3] - cy[..., None]], axis=0)  # (4, h, w, n)
        inside = d.min(axis=0) > 0
        area = (bx[:, 2] - bx[:, 0]) * (bx[:, 3] - bx[:, 1])
        masked = np.where(inside, area, np.inf)
        best = np.argmin(masked, axis=-1)
        hit = np.isfinite(np.take_along_axis(masked, best[..., None], axis=-1)[..., 0])
        labels[b] = np.where(hit, np.asarray(gt.classes)[best] + 1, 0)
        index[b] = np.where(hit, best, -1)
        dist[b] = np.where(hit, np.take_along_axis(d, best[None, ..., None], axis=-1)[..., 0], 0.0)
    return labels, dist, index


def assign_border_targets(coarse_boxes: np.ndarray, gts, iou_thresh=0.6, sigma=SIGMA) -> BorderTargets:
    """Match each coarse box to its highest-IoU object; positive when IoU >= ``iou_thresh``."""
    nb, _, height, width = coarse_boxes.shape
    labels = np.zeros((nb, height, width), dtype=np.int64)
    offsets = np.zeros((nb, 4, height, width))
    index = np.full((nb, height, width), -1, dtype=np.int64)
    for b, gt in enumerate(gts):
        if len(gt) == 0:
            continue
        boxes = np.moveaxis(coarse_boxes[b], 0, -1).astype(np.float64)  # (h, w, 4)
        gtb = np.asarray(gt.boxes, dtype=np.float64)
        ious = iou(boxes[:, :, None, :], gtb[None, None])  # (h, w, n)
        best = np.argmax(ious, axis=-1)
        best_iou = np.take_along_axis(ious, best[..., None], axis=-1)[..., 0]
        pos = best_iou >= iou_thresh
        labels[b] = np.where(pos, np.asarray(gt.classes)[best] + 1, 0)
        index[b] = np.where(pos, best, -1)
        if pos.any():
            enc = encode_offsets(boxes[pos], gtb[best[pos]], sigma)
            tmp = np.moveaxis(offsets[b], 0, -1)
            tmp[pos] = enc
    return BorderTargets(labels, offsets, index)
