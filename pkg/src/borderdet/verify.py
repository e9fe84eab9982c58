"""Self-checks: BorderAlign against a scalar reference and f64 finite-difference gradient checks."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .bam import BamParams, bam_backward, bam_forward
from .border_align import PoolConfig, border_align_backward, border_align_forward
from .boxes import combine_boxes, encode_offsets
from .config import Config
from .detector import BorderDet
from .gradcheck import GradReport, check_layer, grad_check
from .losses import focal_loss, iou_loss, l1_border_loss, total_loss
from .targets import GroundTruth
from .tensor import LayerParams

GRAD_TOLERANCE = 1e-5


# ---------------------------------------------------------------------------
# scalar reference for BorderAlign

def _ref_sample(plane, height, width, x, y):
    x = min(max(x, 0.0), width - 1.0)
    y = min(max(y, 0.0), height - 1.0)
    xl, yl = int(math.floor(x)), int(math.floor(y))
    xh, yh = min(xl + 1, width - 1), min(yl + 1, height - 1)
    lx, ly = x - xl, y - yl
    top = plane[yl][xl] + lx * (plane[yl][xh] - plane[yl][xl])
    bottom = plane[yh][xl] + lx * (plane[yh][xh] - plane[yh][xl])
    return top + ly * (bottom - top)


def reference_border_align(x: np.ndarray, boxes: np.ndarray, n: int) -> np.ndarray:
    """Plain-Python loop over every output slot and every sample; max over samples."""
    nb, c5, height, width = x.shape
    c = c5 // 5
    data = np.asarray(x, dtype=np.float64).tolist()
    bx = np.asarray(boxes, dtype=np.float64).tolist()
    out = np.zeros(x.shape, dtype=np.float64)
    out[:, :c] = x[:, :c]
    if n == 0:
        return out.astype(x.dtype)
    for b in range(nb):
        for i in range(height):
            for j in range(width):
                x0, y0, x1, y1 = bx[b][0][i][j], bx[b][1][i][j], bx[b][2][i][j], bx[b][3][i][j]
                w, h = x1 - x0, y1 - y0
                points = (
                    [(x0, y0 + k * h / n) for k in range(n)],
                    [(x0 + k * w / n, y0) for k in range(n)],
                    [(x1, y0 + k * h / n) for k in range(n)],
                    [(x0 + k * w / n, y1) for k in range(n)],
                )
                for border, pts in enumerate(points):
                    for ch in range(c):
                        cc = (border + 1) * c + ch
                        plane = data[b][cc]
                        out[b, cc, i, j] = max(_ref_sample(plane, height, width, px, py) for px, py in pts)
    return out.astype(x.dtype)


def random_border_instance(rng, max_batch=2, max_c=2, max_hw=16):
    nb = int(rng.integers(1, max_batch + 1))
    c = int(rng.integers(1, max_c + 1))
    h = int(rng.integers(1, max_hw + 1))
    w = int(rng.integers(1, max_hw + 1))
    x = rng.normal(size=(nb, 5 * c, h, w))
    lo = rng.uniform(-2.0, max(h, w) + 1.0, size=(nb, 2, h, w))
    size = rng.uniform(0.0, max(h, w) / 2 + 1.0, size=(nb, 2, h, w))
    return x, np.concatenate([lo, lo + size], axis=1)


@dataclass
class OracleReport:
    instances: int = 0
    mismatches: int = 0
    identity_failures: int = 0
    max_abs_diff: float = 0.0
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return self.instances > 0 and self.mismatches == 0 and self.identity_failures == 0

    def __str__(self):
        return (f"border_align oracle: {self.instances} instances, {self.mismatches} mismatches, "
                f"{self.identity_failures} identity failures, max |diff| {self.max_abs_diff:.3g} "
                f"({self.seconds:.1f}s)")


def oracle_suite(n_instances=1000, seed=0, pool_sizes=(1, 2, 10), use_numba=None) -> OracleReport:
    """Exact comparison of ``border_align_forward`` with the scalar reference on random f64 instances."""
    rng = np.random.default_rng(seed)
    rep = OracleReport()
    t0 = time.perf_counter()
    for t in range(n_instances):
        n = pool_sizes[t % len(pool_sizes)]
        x, boxes = random_border_instance(rng)
        out, _ = border_align_forward(x, boxes, PoolConfig(n), use_numba=use_numba)
        ref = reference_border_align(x, boxes, n)
        c = x.shape[1] // 5
        rep.instances += 1
        if not np.array_equal(out, ref):
            rep.mismatches += 1
            rep.max_abs_diff = max(rep.max_abs_diff, float(np.abs(out - ref).max()))
        if not np.array_equal(out[:, :c], x[:, :c]):
            rep.identity_failures += 1
    rep.seconds = time.perf_counter() - t0
    return rep


def roundtrip_error(n_pairs=10_000, seed=0, sigma=0.5) -> float:
    """Max |combine(coarse, encode(coarse, target)) - target| over random boxes with w, h >= 1."""
    rng = np.random.default_rng(seed)

    def boxes():
        xy = rng.uniform(-50, 50, size=(n_pairs, 2))
        wh = rng.uniform(1, 60, size=(n_pairs, 2))
        return np.concatenate([xy, xy + wh], axis=1)

    coarse, target = boxes(), boxes()
    back = combine_boxes(coarse, encode_offsets(coarse, target, sigma), sigma)
    return float(np.abs(back - target).max())


# ---------------------------------------------------------------------------
# gradient suite

def _tie_free(rng, shape, margin=0.05):
    """Normal samples pushed away from zero so ReLU kinks are not crossed by the FD step."""
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _layer_reports(rng) -> list:
    reports = []
    for stride in (1, 2):
        x = rng.normal(size=(2, 3, 5, 6))
        p = LayerParams(rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4))
        st = {}

        def conv_fwd(inp, p=p, stride=stride, st=st):
            y, st["c"] = layers.conv2d_forward(inp, p, stride=stride, padding=1)
            return y

        reports.append(check_layer(conv_fwd, lambda g, p=p, st=st: layers.conv2d_backward(g, st["c"], p),
                                   x, GRAD_TOLERANCE, f"conv3x3 s{stride} input"))
        proj = rng.standard_normal(conv_fwd(x).shape)
        p.zero_grad()
        layers.conv2d_backward(proj, st["c"], p)
        f = lambda p=p, x=x, proj=proj, stride=stride: float(  # noqa: E731
            np.sum(layers.conv2d_forward(x, p, stride=stride, padding=1)[0] * proj))
        reports.append(grad_check(f, p.weight, p.grad_weight.copy(), GRAD_TOLERANCE, f"conv3x3 s{stride} weight"))
        reports.append(grad_check(f, p.bias, p.grad_bias.copy(), GRAD_TOLERANCE, f"conv3x3 s{stride} bias"))

    x = rng.normal(size=(2, 3, 4, 5))
    p = LayerParams(rng.normal(size=3), rng.normal(size=3))
    st = {}

    def in_fwd(inp):
        y, st["c"] = layers.instance_norm_forward(inp, p)
        return y

    reports.append(check_layer(in_fwd, lambda g: layers.instance_norm_backward(g, st["c"], p), x,
                               GRAD_TOLERANCE, "instance_norm input"))
    proj = rng.standard_normal(x.shape)
    p.zero_grad()
    layers.instance_norm_backward(proj, st["c"], p)
    f = lambda: float(np.sum(layers.instance_norm_forward(x, p)[0] * proj))  # noqa: E731
    reports.append(grad_check(f, p.weight, p.grad_weight.copy(), GRAD_TOLERANCE, "instance_norm gamma"))
    reports.append(grad_check(f, p.bias, p.grad_bias.copy(), GRAD_TOLERANCE, "instance_norm beta"))

    x = _tie_free(rng, (2, 3, 4, 4))
    st_r = {}

    def relu_fwd(inp):
        y, st_r["m"] = layers.relu_forward(inp)
        return y

    reports.append(check_layer(relu_fwd, lambda g: layers.relu_backward(g, st_r["m"]), x, GRAD_TOLERANCE, "relu"))
    return reports


def _border_reports(rng) -> list:
    reports = []
    for n in (1, 2, 10):
        for use_numba in (True, False):
            x, boxes = random_border_instance(rng, 2, 2, 6)
            st = {}

            def fwd(inp, boxes=boxes, n=n, use_numba=use_numba, st=st):
                y, st["r"] = border_align_forward(inp, boxes, PoolConfig(n), use_numba=use_numba)
                return y

            backend = "numba" if use_numba else "numpy"
            reports.append(check_layer(
                fwd, lambda g, st=st, use_numba=use_numba: border_align_backward(g, st["r"], use_numba=use_numba),
                x, GRAD_TOLERANCE, f"border_align N={n} {backend}"))
    return reports


def _bam_reports(rng) -> list:
    c, h, w = 3, 5, 5
    params = BamParams.init(rng, c, np.float64)
    params.norm.weight[...] = rng.uniform(0.5, 1.5, size=5 * c)
    params.norm.bias[...] = rng.normal(size=5 * c) * 0.1
    feat = rng.normal(size=(2, c, h, w))
    lo = rng.uniform(-1, 5, size=(2, 2, h, w))
    boxes = np.concatenate([lo, lo + rng.uniform(0, 4, size=(2, 2, h, w))], axis=1)
    cfg = PoolConfig(4)
    proj = rng.standard_normal((2, c, h, w))
    f = lambda: float(np.sum(bam_forward(feat, boxes, params, cfg)[0] * proj))  # noqa: E731
    for p in params.named("bam").values():
        p.zero_grad()
    _, cache = bam_forward(feat, boxes, params, cfg)
    g_feat = bam_backward(proj, cache, params)
    reports = [grad_check(f, feat, g_feat, GRAD_TOLERANCE, "bam input")]
    for name, p in params.named("bam").items():
        reports.append(grad_check(f, p.weight, p.grad_weight.copy(), GRAD_TOLERANCE, f"{name} weight"))
        reports.append(grad_check(f, p.bias, p.grad_bias.copy(), GRAD_TOLERANCE, f"{name} bias"))
    return reports


def _loss_reports(rng) -> list:
    reports = []
    logits = rng.normal(size=(2, 3, 4, 4)) * 2
    targets = (rng.uniform(size=logits.shape) < 0.3).astype(np.float64)
    _, g = focal_loss(logits, targets)
    reports.append(grad_check(lambda: focal_loss(logits, targets)[0], logits, g, GRAD_TOLERANCE, "focal"))

    target = np.array([[0.0, 0.0, 10.0, 10.0], [2.0, 3.0, 9.0, 12.0], [-4.0, -1.0, 6.0, 5.0]])
    pred = target + rng.uniform(-2.0, 2.0, size=target.shape)
    _, g = iou_loss(pred, target)
    reports.append(grad_check(lambda: float(iou_loss(pred, target)[0].sum()), pred, g, GRAD_TOLERANCE, "iou"))

    off = rng.normal(size=(2, 4, 3, 3))
    tgt = off + np.where(rng.uniform(size=off.shape) < 0.5, -1, 1) * rng.uniform(0.1, 1.0, size=off.shape)
    pos = rng.uniform(size=(2, 3, 3)) < 0.5
    _, g = l1_border_loss(off, tgt, pos)
    reports.append(grad_check(lambda: l1_border_loss(off, tgt, pos)[0], off, g, GRAD_TOLERANCE, "l1"))

    k, h, w = 2, 3, 3
    cl = rng.normal(size=(2, k, h, w))
    bl = rng.normal(size=(2, k, h, w))
    labels_c = rng.integers(0, k + 1, size=(2, h, w))
    labels_b = rng.integers(0, k + 1, size=(2, h, w))
    dist_t = rng.uniform(2.0, 10.0, size=(2, 4, h, w))
    dist = dist_t * rng.uniform(0.6, 1.4, size=dist_t.shape)
    bo = rng.normal(size=(2, 4, h, w))
    bo_t = bo + np.where(rng.uniform(size=bo.shape) < 0.5, -1, 1) * rng.uniform(0.1, 1.0, size=bo.shape)
    args = [cl, dist, bl, bo]
    res = total_loss(cl, dist, bl, bo, labels_c, dist_t, labels_b, bo_t)
    f = lambda: total_loss(cl, dist, bl, bo, labels_c, dist_t, labels_b, bo_t).total  # noqa: E731
    for arr, key in zip(args, ("coarse_logits", "coarse_dist", "border_logits", "border_offsets")):
        reports.append(grad_check(f, arr, res.grads[key], GRAD_TOLERANCE, f"total_loss {key}"))
    return reports


def small_head_config(**kw) -> Config:
    base = dict(image_size=32, backbone_channels=(3, 4, 4), cls_channels=4, reg_channels=4, pool_size=4,
                precision="f64", seed=3)
    base.update(kw)
    return Config(**base)


def head_problem(seed=0):
    """Tiny detector, two images and fixed coarse boxes exercising every loss term."""
    cfg = small_head_config()
    model = BorderDet(cfg)
    rng = np.random.default_rng(seed)
    images = rng.normal(size=(2, cfg.in_channels, cfg.image_size, cfg.image_size))
    gts = [
        GroundTruth(np.array([0, 1]), np.array([[2.0, 3.0, 17.0, 20.0], [14.0, 12.0, 30.0, 29.0]]),
                    np.zeros((2, 4, 2))),
        GroundTruth(np.array([1]), np.array([[5.0, 4.0, 27.0, 26.0]]), np.zeros((1, 4, 2))),
    ]
    fs = cfg.feature_size
    boxes = np.empty((2, 4, fs, fs))
    for b, gt in enumerate(gts):
        for i in range(fs):
            for j in range(fs):
                src = gt.boxes[(i + j) % len(gt)]
                # alternate near-matches (border positives) and loose boxes (negatives)
                jitter = 1.0 if (i * fs + j) % 2 == 0 else 6.0
                boxes[b, :, i, j] = src + rng.uniform(-jitter, jitter, size=4)
    boxes[:, 2:] = np.maximum(boxes[:, 2:], boxes[:, :2] + 2.0)
    # make the border heads non-trivial so their gradients reach the BAMs
    for p in (model.border_cls_head, model.border_reg_head):
        p.weight[...] = rng.normal(size=p.weight.shape) * 0.3
    return model, images, gts, boxes


def _head_reports(rng, max_entries=40) -> list:
    from .train import compute_loss
    model, images, gts, boxes = head_problem()
    model.zero_grad()
    res, _, cache, _ = compute_loss(model, images, gts, boxes_override=boxes)
    model.backward(res.grads, cache)
    f = lambda: compute_loss(model, images, gts, boxes_override=boxes)[0].total  # noqa: E731
    reports = []
    for name, p in model.named_params().items():
        for which, value, grad in (("weight", p.weight, p.grad_weight), ("bias", p.bias, p.grad_bias)):
            reports.append(grad_check(f, value, grad.copy(), GRAD_TOLERANCE, f"head {name}.{which}",
                                      max_entries=max_entries, rng=rng))
    return reports


@dataclass
class GradientSuite:
    reports: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.reports) and all(r.passed for r in self.reports)

    @property
    def worst(self) -> GradReport:
        return max(self.reports, key=lambda r: r.max_rel_err)


def gradient_suite(seed=0, head_entries=40) -> GradientSuite:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    reports = (_layer_reports(rng) + _border_reports(rng) + _bam_reports(rng) + _loss_reports(rng)
               + _head_reports(rng, head_entries))
    return GradientSuite(reports, time.perf_counter() - t0)
