"""Diagnostics: where BorderAlign samples land relative to extreme points, and IoU histograms."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .detector import BorderDet, HeadOutputs, final_boxes
from .evaluate import iou_bucket_counts
from .layers import sigmoid
from .targets import assign_border_targets
from .train import run_model

HIST_EDGES = np.linspace(-1.0, 1.0, 21)


@dataclass
class ExtremePointReport:
    distances: np.ndarray  # signed, normalized by border length
    counts: np.ndarray
    edges: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.distances.mean()) if self.distances.size else float("nan")

    @property
    def mean_abs(self) -> float:
        return float(np.abs(self.distances).mean()) if self.distances.size else float("nan")

    def summary(self) -> dict:
        return {"n": int(self.distances.size), "mean": self.mean, "mean_abs": self.mean_abs,
                "std": float(self.distances.std()) if self.distances.size else float("nan")}


def border_distances(sample_xy, boxes, extremes):
    """Signed along-border distance from samples to extreme points, over border length.

    ``sample_xy`` is (n, 4, c, 2) image coordinates per (border, channel);
    ``boxes`` (n, 4) and ``extremes`` (n, 4, 2) in (L, T, R, B) order.
    Left/right borders measure along y, top/bottom along x.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    length = np.stack([h, w, h, w], axis=1)[:, :, None]  # (n, 4, 1)
    axis = np.array([1, 0, 1, 0])  # coordinate running along each border
    along = np.take_along_axis(sample_xy, axis[None, :, None, None], axis=-1)[..., 0]
    target = np.take_along_axis(extremes, axis[None, :, None], axis=-1)  # (n, 4, 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = (along - target) / length
    return d


def analyze_extreme_points(model: BorderDet, dataset: Dataset, classes=None, out: HeadOutputs | None = None,
                           branch="reg") -> ExtremePointReport:
    """Histogram of normalized distances between regression-branch argmax samples and GT extreme points.

    Only locations whose coarse box is a border-stage positive count; every
    channel of the chosen branch contributes one sample per border.
    """
    cfg = model.cfg
    out = run_model(model, dataset.images) if out is None else out
    rec = out.reg_record if branch == "reg" else out.cls_record
    bt = assign_border_targets(out.coarse_boxes, dataset.gts, cfg.border_iou_thresh, cfg.sigma)
    chunks = []
    if rec.pool_size > 0 and rec.aggregation != "avg":
        for b, gt in enumerate(dataset.gts):
            ii, jj = np.nonzero(bt.labels[b] > 0)
            if ii.size == 0:
                continue
            obj = bt.gt_index[b, ii, jj]
            if classes is not None:
                keep = np.isin(np.asarray(gt.classes)[obj], classes)
                ii, jj, obj = ii[keep], jj[keep], obj[keep]
            if ii.size == 0:
                continue
            # record coordinates are feature-map units; map back to image pixels
            sx = (rec.x[b][:, :, ii, jj] + 0.5) * cfg.stride  # (4, c, n)
            sy = (rec.y[b][:, :, ii, jj] + 0.5) * cfg.stride
            samples = np.stack([sx, sy], axis=-1).transpose(2, 0, 1, 3)  # (n, 4, c, 2)
            boxes = out.coarse_boxes[b][:, ii, jj].T
            d = border_distances(samples, boxes, np.asarray(gt.extremes)[obj])
            chunks.append(d[np.isfinite(d)])
    dist = np.concatenate(chunks) if chunks else np.zeros(0)
    counts, _ = np.histogram(np.clip(dist, HIST_EDGES[0], HIST_EDGES[-1]), bins=HIST_EDGES)
    return ExtremePointReport(dist, counts, HIST_EDGES)


def analyze_iou_histogram(model: BorderDet, dataset: Dataset, out: HeadOutputs | None = None) -> dict:
    """IoU-bucket counts of coarse vs refined boxes over the same candidate set.

    Candidates are (location, class) pairs with coarse probability above the
    score threshold, before NMS.
    """
    cfg = model.cfg
    out = run_model(model, dataset.images) if out is None else out
    coarse_prob = sigmoid(out.coarse_cls_logits.astype(np.float64))
    result = {}
    for mode in ("coarse", "refined"):
        boxes = final_boxes(out, cfg, mode)
        per_img_boxes, per_img_labels = [], []
        for b in range(len(dataset)):
            k = coarse_prob.shape[1]
            loc, cls = np.nonzero(coarse_prob[b].reshape(k, -1).T > cfg.score_thresh)
            per_img_boxes.append(boxes[b].reshape(4, -1).T[loc])
            per_img_labels.append(cls)
        result[mode] = iou_bucket_counts(per_img_boxes, per_img_labels, dataset.gts)
    return result


def write_extreme_csv(report: ExtremePointReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(report.edges[:-1], report.edges[1:], report.counts):
            w.writerow([f"{lo:.2f}", f"{hi:.2f}", int(c)])
    Path(path).with_suffix(".json").write_text(json.dumps(report.summary(), indent=2))


def write_iou_csv(hist: dict, path) -> None:
    buckets = list(hist["coarse"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bucket", "coarse", "refined"])
        for bk in buckets:
            w.writerow([bk, hist["coarse"][bk], hist["refined"][bk]])
    Path(path).with_suffix(".json").write_text(json.dumps(hist, indent=2))
