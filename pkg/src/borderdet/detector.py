"""BorderDet head: coarse dense prediction refined by two Border Alignment Modules.

Layout (single feature level, stride 8 by default)::

    image -> [3x3 s2 conv + relu] x 3 -> feat
    feat -> 3x3 conv + relu -> cls tower -> 1x1 -> coarse logits
                                       \\-> BAM(cls) -> 1x1 -> border logits
    feat -> 3x3 conv + relu -> reg tower -> 1x1 -> softplus * stride -> l, t, r, b
                                       \\-> BAM(reg) -> 1x1 -> border offsets

Coarse boxes are decoded from (l, t, r, b), clamped to the image, and fed to
both BAMs as constants.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers
from .bam import BamParams, bam_backward, bam_forward
from .border_align import ArgmaxRecord, PoolConfig
from .boxes import combine_boxes, decode_field
from .config import Config
from .evaluate import Detections, nms
from .tensor import LayerParams, dtype_for

PRIOR_PROB = 0.01


@dataclass
class HeadOutputs:
    coarse_cls_logits: np.ndarray  # (b, k, h, w)
    coarse_reg: np.ndarray         # (b, 4, h, w) l, t, r, b pixel distances >= 0
    border_cls_logits: np.ndarray  # (b, k, h, w)
    border_offsets: np.ndarray     # (b, 4, h, w)
    coarse_boxes: np.ndarray       # (b, 4, h, w) image coordinates
    cls_record: ArgmaxRecord | None = field(default=None, repr=False)
    reg_record: ArgmaxRecord | None = field(default=None, repr=False)


@dataclass
class Detection:
    label: int
    score: float
    box: tuple


class BorderDet:
    """Parameters plus explicit forward/backward for the whole detector."""

    def __init__(self, cfg: Config = Config(), seed: int | None = None, dtype=None):
        self.cfg = cfg
        self.dtype = dtype or dtype_for(cfg.precision)
        self.pool = PoolConfig(cfg.pool_size, cfg.aggregation)
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        dt = self.dtype
        self.backbone = []
        prev = cfg.in_channels
        for ch in cfg.backbone_channels:
            self.backbone.append(layers.init_conv(rng, prev, ch, 3, dt))
            prev = ch
        self.cls_tower = layers.init_conv(rng, prev, cfg.cls_channels, 3, dt)
        self.reg_tower = layers.init_conv(rng, prev, cfg.reg_channels, 3, dt)
        self.cls_head = _small_conv(rng, cfg.cls_channels, cfg.num_classes, dt)
        self.reg_head = _small_conv(rng, cfg.reg_channels, 4, dt)
        self.cls_bam = BamParams.init(rng, cfg.cls_channels, dt)
        self.reg_bam = BamParams.init(rng, cfg.reg_channels, dt)
        self.border_cls_head = _small_conv(rng, cfg.cls_channels, cfg.num_classes, dt)
        self.border_reg_head = _small_conv(rng, cfg.reg_channels, 4, dt)
        prior = -np.log((1 - PRIOR_PROB) / PRIOR_PROB)
        self.cls_head.bias[...] = prior
        self.border_cls_head.bias[...] = prior

    # -- parameters ---------------------------------------------------------

    def named_params(self) -> dict:
        named = {f"backbone.{i}": p for i, p in enumerate(self.backbone)}
        named.update({
            "cls_tower": self.cls_tower, "reg_tower": self.reg_tower,
            "cls_head": self.cls_head, "reg_head": self.reg_head,
        })
        named.update(self.cls_bam.named("cls_bam"))
        named.update(self.reg_bam.named("reg_bam"))
        named.update({"border_cls_head": self.border_cls_head, "border_reg_head": self.border_reg_head})
        return named

    def zero_grad(self):
        for p in self.named_params().values():
            p.zero_grad()

    def zero_border_heads(self):
        for p in (self.border_cls_head, self.border_reg_head):
            p.weight[...] = 0
            p.bias[...] = 0

    def astype(self, dtype) -> "BorderDet":
        clone = BorderDet.__new__(BorderDet)
        clone.cfg, clone.pool, clone.dtype = self.cfg, self.pool, dtype
        clone.backbone = [p.astype(dtype) for p in self.backbone]
        for name in ("cls_tower", "reg_tower", "cls_head", "reg_head", "border_cls_head", "border_reg_head"):
            setattr(clone, name, getattr(self, name).astype(dtype))
        for name in ("cls_bam", "reg_bam"):
            bam = getattr(self, name)
            setattr(clone, name, BamParams(bam.expand.astype(dtype), bam.norm.astype(dtype), bam.reduce.astype(dtype)))
        return clone

    # -- forward / backward -------------------------------------------------

    def backbone_forward(self, images):
        x = np.asarray(images, dtype=self.dtype)
        caches = []
        for p in self.backbone:
            x, c_conv = layers.conv2d_forward(x, p, stride=2, padding=1)
            x, mask = layers.relu_forward(x)
            caches.append((c_conv, mask))
        return x, caches

    def head_forward(self, feat, boxes_override=None):
        """Run both prediction stages on backbone features.

        ``boxes_override`` replaces the decoded coarse boxes fed to the BAMs;
        gradient checks use it to hold the (non-differentiated) boxes fixed.
        """
        cfg = self.cfg
        cls_pre, c_ct = layers.conv2d_forward(feat, self.cls_tower, padding=1)
        cls_t, m_ct = layers.relu_forward(cls_pre)
        reg_pre, c_rt = layers.conv2d_forward(feat, self.reg_tower, padding=1)
        reg_t, m_rt = layers.relu_forward(reg_pre)

        coarse_logits, c_ch = layers.conv2d_forward(cls_t, self.cls_head, padding=0)
        raw, c_rh = layers.conv2d_forward(reg_t, self.reg_head, padding=0)
        dist = cfg.stride * layers.softplus(raw)

        if boxes_override is None:
            coarse_boxes = decode_field(dist, cfg.stride, cfg.image_size)
        else:
            coarse_boxes = np.asarray(boxes_override, dtype=self.dtype)
        boxes_feat = coarse_boxes / cfg.stride - 0.5

        cls_bam, c_cb = bam_forward(cls_t, boxes_feat, self.cls_bam, self.pool)
        border_logits, c_bch = layers.conv2d_forward(cls_bam, self.border_cls_head, padding=0)
        reg_bam, c_rb = bam_forward(reg_t, boxes_feat, self.reg_bam, self.pool)
        offsets, c_brh = layers.conv2d_forward(reg_bam, self.border_reg_head, padding=0)

        out = HeadOutputs(coarse_logits, dist, border_logits, offsets, coarse_boxes,
                          c_cb.record, c_rb.record)
        cache = dict(c_ct=c_ct, m_ct=m_ct, c_rt=c_rt, m_rt=m_rt, c_ch=c_ch, c_rh=c_rh, raw=raw,
                     c_cb=c_cb, c_bch=c_bch, c_rb=c_rb, c_brh=c_brh)
        return out, cache

    def forward(self, images, boxes_override=None):
        feat, bb_caches = self.backbone_forward(images)
        out, head_cache = self.head_forward(feat, boxes_override)
        return out, (bb_caches, head_cache)

    def head_backward(self, grads: dict, cache) -> np.ndarray:
        cfg = self.cfg
        g_bl = layers.conv2d_backward(grads["border_logits"], cache["c_bch"], self.border_cls_head)
        g_cls_t = bam_backward(g_bl, cache["c_cb"], self.cls_bam)
        g_off = layers.conv2d_backward(grads["border_offsets"], cache["c_brh"], self.border_reg_head)
        g_reg_t = bam_backward(g_off, cache["c_rb"], self.reg_bam)

        g_cls_t = g_cls_t + layers.conv2d_backward(grads["coarse_logits"], cache["c_ch"], self.cls_head)
        g_raw = grads["coarse_dist"] * (cfg.stride * layers.sigmoid(cache["raw"]))
        g_reg_t = g_reg_t + layers.conv2d_backward(g_raw.astype(self.dtype, copy=False), cache["c_rh"], self.reg_head)

        g_feat = layers.conv2d_backward(layers.relu_backward(g_cls_t, cache["m_ct"]), cache["c_ct"], self.cls_tower)
        g_feat = g_feat + layers.conv2d_backward(layers.relu_backward(g_reg_t, cache["m_rt"]), cache["c_rt"], self.reg_tower)
        return g_feat

    def backward(self, grads: dict, cache) -> np.ndarray:
        bb_caches, head_cache = cache
        g = self.head_backward(grads, head_cache)
        for p, (c_conv, mask) in zip(reversed(self.backbone), reversed(bb_caches)):
            g = layers.conv2d_backward(layers.relu_backward(g, mask), c_conv, p)
        return g

    # -- inference ----------------------------------------------------------

    def predict(self, images, mode="refined"):
        out, _ = self.forward(images)
        return postprocess(out, self.cfg, mode)


def _small_conv(rng, in_ch, out_ch, dtype):
    return LayerParams((rng.standard_normal((out_ch, in_ch, 1, 1)) * 0.01).astype(dtype),
                       np.zeros(out_ch, dtype=dtype))


def final_boxes(out: HeadOutputs, cfg: Config, mode="refined") -> np.ndarray:
    """(b, 4, h, w) boxes in image coordinates for ``mode`` in {"coarse", "refined"}."""
    if mode == "coarse":
        return out.coarse_boxes.astype(np.float64)
    boxes = combine_boxes(np.moveaxis(out.coarse_boxes, 1, -1), np.moveaxis(out.border_offsets, 1, -1), cfg.sigma)
    boxes = np.clip(boxes, 0, cfg.image_size)
    return np.moveaxis(boxes, -1, 1).astype(np.float64)


def final_scores(out: HeadOutputs, mode="refined") -> np.ndarray:
    coarse = layers.sigmoid(out.coarse_cls_logits.astype(np.float64))
    if mode == "coarse":
        return coarse
    return coarse * layers.sigmoid(out.border_cls_logits.astype(np.float64))


def postprocess(out: HeadOutputs, cfg: Config, mode="refined") -> list:
    """Per-image ``Detections`` after candidate selection, top-k and class-wise NMS.

    Candidates are the (location, class) pairs whose coarse probability exceeds
    ``score_thresh`` in both modes, so the two modes rank the same candidate set.
    """
    if mode not in ("coarse", "refined"):
        raise ValueError(f"unknown mode {mode!r}")
    coarse_prob = layers.sigmoid(out.coarse_cls_logits.astype(np.float64))
    scores = final_scores(out, mode)
    boxes = final_boxes(out, cfg, mode)
    nb, k, h, w = scores.shape
    results = []
    for b in range(nb):
        cand = coarse_prob[b].reshape(k, -1).T > cfg.score_thresh  # (hw, k)
        loc, cls = np.nonzero(cand)
        s = scores[b].reshape(k, -1).T[loc, cls]
        bx = boxes[b].reshape(4, -1).T[loc]
        order = np.argsort(-s, kind="stable")[: cfg.pre_nms_top_n]
        dets = Detections(bx[order], s[order], cls[order])
        keep = nms(dets, cfg.nms_thresh)[: cfg.max_detections]
        results.append(dets.take(keep))
    return results
