"""Box geometry: IoU, coarse decoding, offset encoding and box/score combination.

Boxes are (x0, y0, x1, y1) in continuous coordinates; the last axis (or
axis 1 for per-location fields) holds the four values.
"""
from __future__ import annotations

import numpy as np

SIGMA = 0.5


def box_area(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.clip(boxes[..., 2] - boxes[..., 0], 0, None) * np.clip(boxes[..., 3] - boxes[..., 1], 0, None)


def iou(a, b):
    """Elementwise IoU of broadcastable (..., 4) box arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = box_area(a) + box_area(b) - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def pairwise_iou(a, b):
    """(n, 4) x (m, 4) -> (n, m)."""
    return iou(np.asarray(a, dtype=np.float64)[:, None, :], np.asarray(b, dtype=np.float64)[None, :, :])


def location_centers(height: int, width: int, stride: int):
    """Image-space centers of feature-map cells: ((j+0.5)*stride, (i+0.5)*stride)."""
    ys = (np.arange(height, dtype=np.float64) + 0.5) * stride
    xs = (np.arange(width, dtype=np.float64) + 0.5) * stride
    return np.meshgrid(xs, ys)  # cx, cy each (h, w)


def decode_coarse(point, distances, stride: int, image_size=None):
    """Box from distances (l, t, r, b) measured from the center of cell (i, j)."""
    i, j = point
    left, top, right, bottom = (max(0.0, float(d)) for d in distances)
    cx = (j + 0.5) * stride
    cy = (i + 0.5) * stride
    box = np.array([cx - left, cy - top, cx + right, cy + bottom])
    if image_size is not None:
        h, w = _hw(image_size)
        box = np.clip(box, 0, [w, h, w, h])
    return box


def decode_field(distances: np.ndarray, stride: int, image_size=None) -> np.ndarray:
    """Vectorized ``decode_coarse`` over a (b, 4, h, w) distance field."""
    d = np.clip(distances, 0, None)
    _, _, height, width = d.shape
    cx, cy = location_centers(height, width, stride)
    boxes = np.stack([cx - d[:, 0], cy - d[:, 1], cx + d[:, 2], cy + d[:, 3]], axis=1)
    if image_size is not None:
        h, w = _hw(image_size)
        boxes = np.clip(boxes, 0, np.array([w, h, w, h], dtype=np.float64)[None, :, None, None])
    return boxes.astype(distances.dtype)


def _hw(image_size):
    if np.isscalar(image_size):
        return image_size, image_size
    return image_size


def encode_offsets(coarse, target, sigma=SIGMA):
    """Offsets that move ``coarse`` onto ``target``, normalized by coarse width/height and sigma."""
    coarse = np.asarray(coarse, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    w = coarse[..., 2] - coarse[..., 0]
    h = coarse[..., 3] - coarse[..., 1]
    scale = np.stack([w, h, w, h], axis=-1) * sigma
    return (target - coarse) / scale


def combine_boxes(coarse, offsets, sigma=SIGMA):
    """Apply border offsets to coarse boxes; coordinates are re-ordered if they cross."""
    coarse = np.asarray(coarse)
    offsets = np.asarray(offsets)
    w = coarse[..., 2] - coarse[..., 0]
    h = coarse[..., 3] - coarse[..., 1]
    scale = np.stack([w, h, w, h], axis=-1) * sigma
    out = coarse + offsets * scale
    x0 = np.minimum(out[..., 0], out[..., 2])
    x1 = np.maximum(out[..., 0], out[..., 2])
    y0 = np.minimum(out[..., 1], out[..., 3])
    y1 = np.maximum(out[..., 1], out[..., 3])
    return np.stack([x0, y0, x1, y1], axis=-1)


def combine_scores(coarse_prob, border_prob):
    return np.asarray(coarse_prob) * np.asarray(border_prob)
