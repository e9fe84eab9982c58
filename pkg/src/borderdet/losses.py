"""Focal, IoU and L1 losses with analytic gradients, and the four-term detector loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IOU_FLOOR = 1e-7


def focal_loss(logits, targets, alpha=0.25, gamma=2.0):
    """Sigmoid focal loss summed over all entries. Returns (loss, d loss / d logits).

    ``targets`` is a {0, 1} array shaped like ``logits``.
    """
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    log_p = -np.logaddexp(0.0, -x)
    log_q = -np.logaddexp(0.0, x)  # log(1 - p)
    p = np.exp(log_p)
    q = np.exp(log_q)
    pos = alpha * q ** gamma
    neg = (1.0 - alpha) * p ** gamma
    loss = t * pos * (-log_p) + (1.0 - t) * neg * (-log_q)
    grad = t * pos * (gamma * p * log_p - q) + (1.0 - t) * neg * (p - gamma * q * log_q)
    return float(loss.sum()), grad.astype(np.asarray(logits).dtype, copy=False)


def iou_loss(pred, target):
    """-log(IoU) per box pair, IoU floored at 1e-7. Returns (per-box losses, d loss / d pred).

    Both inputs are (..., 4) well-ordered (x0, y0, x1, y1) boxes.
    """
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(target, dtype=np.float64)
    px0, py0, px1, py1 = np.moveaxis(p, -1, 0)
    gx0, gy0, gx1, gy1 = np.moveaxis(g, -1, 0)
    iw_raw = np.minimum(px1, gx1) - np.maximum(px0, gx0)
    ih_raw = np.minimum(py1, gy1) - np.maximum(py0, gy0)
    iw = np.clip(iw_raw, 0, None)
    ih = np.clip(ih_raw, 0, None)
    inter = iw * ih
    pw = px1 - px0
    ph = py1 - py0
    union = pw * ph + (gx1 - gx0) * (gy1 - gy0) - inter
    ratio = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    live = ratio > IOU_FLOOR
    loss = -np.log(np.maximum(ratio, IOU_FLOOR))

    # d inter / d pred: only the sides that currently bound the intersection move it
    d_inter = np.stack([
        -ih * (px0 > gx0), -iw * (py0 > gy0), ih * (px1 < gx1), iw * (py1 < gy1)], axis=-1)
    d_area = np.stack([-ph, -pw, ph, pw], axis=-1)
    safe_union = np.where(live, union, 1.0)[..., None]
    safe_inter = np.where(live, inter, 1.0)[..., None]
    grad = (d_area - d_inter) / safe_union - d_inter / safe_inter
    grad = np.where(live[..., None], grad, 0.0)
    return loss, grad


def l1_border_loss(offsets, target_offsets, positive):
    """Mean |offsets - targets| over positive locations x 4 coords; zero when nothing is positive.

    ``offsets``/``target_offsets`` are (b, 4, h, w); ``positive`` is a (b, h, w) mask.
    """
    mask = np.asarray(positive, dtype=bool)[:, None]
    n = int(mask.sum()) * 4
    if n == 0:
        return 0.0, np.zeros_like(offsets)
    diff = np.asarray(offsets, dtype=np.float64) - target_offsets
    loss = float(np.abs(diff)[np.broadcast_to(mask, diff.shape)].sum() / n)
    grad = np.where(mask, np.sign(diff), 0.0) / n
    return loss, grad.astype(np.asarray(offsets).dtype, copy=False)


def one_hot(labels, num_classes):
    """(b, h, w) labels with 0 = background -> (b, k, h, w) binary targets."""
    labels = np.asarray(labels)
    classes = np.arange(1, num_classes + 1).reshape(1, -1, 1, 1)
    return (labels[:, None] == classes).astype(np.float64)


@dataclass
class LossResult:
    total: float
    terms: dict
    grads: dict = field(repr=False)
    n_pos_coarse: int = 0
    n_pos_border: int = 0


def total_loss(coarse_logits, coarse_dist, border_logits, border_offsets,
               coarse_labels, coarse_dist_targets, border_labels, border_offset_targets,
               alpha=0.25, gamma=2.0) -> LossResult:
    """Coarse focal + coarse IoU + border focal (per border positive) + border L1.

    Coarse focal is normalized by the coarse positive count and the IoU term
    is the mean over coarse positives. Gradients are returned for the four
    head outputs; distances are (l, t, r, b) pixel distances from cell centers.
    """
    k = coarse_logits.shape[1]
    pos_c = np.asarray(coarse_labels) > 0
    pos_b = np.asarray(border_labels) > 0
    n_c = int(pos_c.sum())
    n_b = int(pos_b.sum())
    norm_c = max(1, n_c)
    norm_b = max(1, n_b)

    fc, g_cls = focal_loss(coarse_logits, one_hot(coarse_labels, k), alpha, gamma)
    loss_cc = fc / norm_c
    g_cls = g_cls / norm_c

    g_dist = np.zeros_like(coarse_dist, dtype=np.float64)
    loss_cr = 0.0
    if n_c:
        d = np.moveaxis(coarse_dist, 1, -1)[pos_c].astype(np.float64)  # (n, 4) l, t, r, b
        dt = np.moveaxis(coarse_dist_targets, 1, -1)[pos_c].astype(np.float64)
        to_box = np.array([-1.0, -1.0, 1.0, 1.0])
        per_box, g_box = iou_loss(d * to_box, dt * to_box)
        loss_cr = float(per_box.sum() / n_c)
        gd = g_box * to_box / n_c
        tmp = np.moveaxis(g_dist, 1, -1)
        tmp[pos_c] = gd

    fb, g_bcls = focal_loss(border_logits, one_hot(border_labels, k), alpha, gamma)
    loss_bc = fb / norm_b
    g_bcls = g_bcls / norm_b

    loss_br, g_off = l1_border_loss(border_offsets, border_offset_targets, pos_b)

    terms = {"coarse_cls": loss_cc, "coarse_reg": loss_cr, "border_cls": loss_bc, "border_reg": loss_br}
    dtype = coarse_logits.dtype
    grads = {
        "coarse_logits": g_cls.astype(dtype, copy=False),
        "coarse_dist": g_dist.astype(dtype, copy=False),
        "border_logits": g_bcls.astype(dtype, copy=False),
        "border_offsets": g_off.astype(dtype, copy=False),
    }
    return LossResult(sum(terms.values()), terms, grads, n_c, n_b)
