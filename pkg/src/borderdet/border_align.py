"""BorderAlign: channel-wise max pooling of bilinear samples along box borders.

The input carries five channel blocks of width C, ordered (single point,
left, top, right, bottom). Block 0 is copied through. For block ``1 + border``
every channel independently takes the maximum of ``pool_size`` samples taken
along that border of the box predicted at the same location:

    left    (x0, y0 + k*h/N)      top     (x0 + k*w/N, y0)
    right   (x1, y0 + k*h/N)      bottom  (x0 + k*w/N, y1)

for k = 0..N-1, so the far end of each border is never sampled. Boxes are
given in continuous feature-map coordinates and are not differentiated.

Two kernels exist for forward and backward: numba loops (default) and a
vectorized numpy path used when ``BORDERDET_DISABLE_NUMBA`` is set. Both
are always importable so they can be benchmarked against each other.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from ._jit import USE_NUMBA, njit
from .tensor import ShapeError

AGGREGATIONS = ("max", "avg", "border_max", "border_avg")


class Border(enum.IntEnum):
    LEFT = 0
    TOP = 1
    RIGHT = 2
    BOTTOM = 3


@dataclass(frozen=True)
class PoolConfig:
    """``pool_size`` samples per border. Zero disables border pooling."""

    pool_size: int = 10
    # non-"max" modes exist for the aggregation ablation only
    aggregation: str = "max"

    def __post_init__(self):
        if self.pool_size < 0:
            raise ValueError("pool_size must be >= 0")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")


@dataclass
class ArgmaxRecord:
    """Winning sample per (batch, border, channel, y, x).

    ``index`` is -1 where nothing was pooled (pool_size 0, or average mode).
    ``x``/``y`` are the continuous feature-map coordinates of the winner.
    """

    index: np.ndarray
    x: np.ndarray
    y: np.ndarray
    pool_size: int
    input_shape: tuple
    aggregation: str = "max"


def border_sample_coords(box, border, k: int, n: int):
    """Continuous (x, y) of sample ``k`` of ``n`` along ``border`` of ``box``."""
    x0, y0, x1, y1 = box
    w = x1 - x0
    h = y1 - y0
    border = Border(border)
    if border == Border.LEFT:
        return x0, y0 + k * h / n
    if border == Border.TOP:
        return x0 + k * w / n, y0
    if border == Border.RIGHT:
        return x1, y0 + k * h / n
    return x0 + k * w / n, y1


def _check(inp, boxes):
    if inp.ndim != 4 or inp.shape[1] % 5 != 0:
        raise ShapeError(f"input channels must be divisible by 5, got shape {inp.shape}")
    b, _, h, w = inp.shape
    if boxes.shape != (b, 4, h, w):
        raise ShapeError(f"boxes must have shape {(b, 4, h, w)}, got {boxes.shape}")


# ---------------------------------------------------------------------------
# numba kernels

@njit
def _interp_params(x, y, height, width):
    if x < 0.0:
        x = 0.0
    elif x > width - 1:
        x = float(width - 1)
    if y < 0.0:
        y = 0.0
    elif y > height - 1:
        y = float(height - 1)
    x_lo = int(math.floor(x))
    y_lo = int(math.floor(y))
    x_hi = min(x_lo + 1, width - 1)
    y_hi = min(y_lo + 1, height - 1)
    return y_lo, y_hi, x_lo, x_hi, x - x_lo, y - y_lo


@njit
def _lerp2(v00, v01, v10, v11, lx, ly):
    top = v00 + lx * (v01 - v00)
    bottom = v10 + lx * (v11 - v10)
    return top + ly * (bottom - top)


@njit
def _sample_xy(border, k, n, x0, y0, x1, y1):
    if border == 0:
        return x0, y0 + k * (y1 - y0) / n
    if border == 1:
        return x0 + k * (x1 - x0) / n, y0
    if border == 2:
        return x1, y0 + k * (y1 - y0) / n
    return x0 + k * (x1 - x0) / n, y1


@njit
def _forward_numba(inp, boxes, n, out, arg_k, arg_x, arg_y):
    nb, c5, height, width = inp.shape
    c = c5 // 5
    best = np.empty(c, dtype=np.float64)
    for b in range(nb):
        for i in range(height):
            for j in range(width):
                for ch in range(c):
                    out[b, ch, i, j] = inp[b, ch, i, j]
                x0 = np.float64(boxes[b, 0, i, j])
                y0 = np.float64(boxes[b, 1, i, j])
                x1 = np.float64(boxes[b, 2, i, j])
                y1 = np.float64(boxes[b, 3, i, j])
                for border in range(4):
                    base = (border + 1) * c
                    # sample geometry is shared by every channel of the block
                    for k in range(n):
                        sx, sy = _sample_xy(border, k, n, x0, y0, x1, y1)
                        y_lo, y_hi, x_lo, x_hi, lx, ly = _interp_params(sx, sy, height, width)
                        for ch in range(c):
                            v = _lerp2(np.float64(inp[b, base + ch, y_lo, x_lo]), np.float64(inp[b, base + ch, y_lo, x_hi]),
                                       np.float64(inp[b, base + ch, y_hi, x_lo]), np.float64(inp[b, base + ch, y_hi, x_hi]),
                                       lx, ly)
                            if k == 0 or v > best[ch]:
                                best[ch] = v
                                arg_k[b, border, ch, i, j] = k
                                arg_x[b, border, ch, i, j] = sx
                                arg_y[b, border, ch, i, j] = sy
                    for ch in range(c):
                        out[b, base + ch, i, j] = best[ch]


@njit
def _backward_numba(grad_out, arg_k, arg_x, arg_y, grad_in):
    nb, c5, height, width = grad_out.shape
    c = c5 // 5
    for b in range(nb):
        for i in range(height):
            for j in range(width):
                for ch in range(c):
                    grad_in[b, ch, i, j] += grad_out[b, ch, i, j]
                for border in range(4):
                    base = (border + 1) * c
                    for ch in range(c):
                        if arg_k[b, border, ch, i, j] < 0:
                            continue
                        g = grad_out[b, base + ch, i, j]
                        y_lo, y_hi, x_lo, x_hi, lx, ly = _interp_params(
                            arg_x[b, border, ch, i, j], arg_y[b, border, ch, i, j], height, width)
                        w1 = (1.0 - ly) * (1.0 - lx)
                        w2 = (1.0 - ly) * lx
                        w3 = ly * (1.0 - lx)
                        w4 = ly * lx
                        grad_in[b, base + ch, y_lo, x_lo] += w1 * g
                        grad_in[b, base + ch, y_lo, x_hi] += w2 * g
                        grad_in[b, base + ch, y_hi, x_lo] += w3 * g
                        grad_in[b, base + ch, y_hi, x_hi] += w4 * g


# ---------------------------------------------------------------------------
# numpy kernels

def _np_interp_params(x, y, height, width):
    x = np.clip(x, 0.0, width - 1)
    y = np.clip(y, 0.0, height - 1)
    x_lo = np.floor(x).astype(np.intp)
    y_lo = np.floor(y).astype(np.intp)
    x_hi = np.minimum(x_lo + 1, width - 1)
    y_hi = np.minimum(y_lo + 1, height - 1)
    return y_lo, y_hi, x_lo, x_hi, x - x_lo, y - y_lo


def _np_weights(lx, ly):
    return (1.0 - ly) * (1.0 - lx), (1.0 - ly) * lx, ly * (1.0 - lx), ly * lx


def _np_border_coords(boxes, border, n):
    """Sample coordinates of shape (b, h, w, n) in float64."""
    x0, y0, x1, y1 = (boxes[:, t].astype(np.float64)[..., None] for t in range(4))
    k = np.arange(n, dtype=np.float64)
    if border == 0:
        return np.broadcast_to(x0, y0.shape[:-1] + (n,)), y0 + k * (y1 - y0) / n
    if border == 1:
        return x0 + k * (x1 - x0) / n, np.broadcast_to(y0, y0.shape[:-1] + (n,))
    if border == 2:
        return np.broadcast_to(x1, y0.shape[:-1] + (n,)), y0 + k * (y1 - y0) / n
    return x0 + k * (x1 - x0) / n, np.broadcast_to(y1, y0.shape[:-1] + (n,))


def _np_border_values(block, sx, sy):
    """Sampled values of shape (b, h, w, n, c) for a (b, c, h, w) block."""
    nb, _, height, width = block.shape
    y_lo, y_hi, x_lo, x_hi, lx, ly = _np_interp_params(sx, sy, height, width)
    lx = lx[..., None]
    ly = ly[..., None]
    bidx = np.arange(nb)[:, None, None, None]
    plane = block.transpose(0, 2, 3, 1).astype(np.float64, copy=False)  # (b, h, w, c)
    v00 = plane[bidx, y_lo, x_lo]
    v10 = plane[bidx, y_hi, x_lo]
    top = v00 + lx * (plane[bidx, y_lo, x_hi] - v00)
    bottom = v10 + lx * (plane[bidx, y_hi, x_hi] - v10)
    return top + ly * (bottom - top)


def _forward_numpy(inp, boxes, n, out, arg_k, arg_x, arg_y, aggregation="max"):
    c = inp.shape[1] // 5
    out[:, :c] = inp[:, :c]
    for border in range(4):
        block = inp[:, (border + 1) * c:(border + 2) * c]
        sx, sy = _np_border_coords(boxes, border, n)
        vals = _np_border_values(block, sx, sy)  # (b, h, w, n, c)
        if aggregation == "avg":
            pooled = vals.mean(axis=3)
            arg_k[:, border] = -1
        else:
            if aggregation == "max":
                k = np.argmax(vals, axis=3)  # first max wins -> lowest k on ties
            else:
                score = vals.mean(axis=4) if aggregation == "border_avg" else vals.max(axis=4)
                k = np.broadcast_to(np.argmax(score, axis=3)[..., None], vals.shape[:3] + (c,))
            pooled = np.take_along_axis(vals, k[:, :, :, None, :], axis=3)[:, :, :, 0, :]
            kk = k.transpose(0, 3, 1, 2)
            arg_k[:, border] = kk
            bi, ci, ii, ji = np.indices(kk.shape, sparse=True)
            arg_x[:, border] = sx[bi, ii, ji, kk]
            arg_y[:, border] = sy[bi, ii, ji, kk]
        out[:, (border + 1) * c:(border + 2) * c] = pooled.transpose(0, 3, 1, 2)


def _scatter_bilinear(grad_block, sx, sy, g):
    """Accumulate ``g`` into ``grad_block`` at bilinear sample points (any matching shapes)."""
    nb, c, height, width = grad_block.shape
    y_lo, y_hi, x_lo, x_hi, lx, ly = _np_interp_params(sx, sy, height, width)
    w1, w2, w3, w4 = _np_weights(lx, ly)
    bidx, cidx = np.indices((nb, c), sparse=True)
    extra = sx.ndim - 2
    bidx = bidx.reshape((nb, 1) + (1,) * extra)
    cidx = cidx.reshape((1, c) + (1,) * extra)
    base = (bidx * c + cidx) * height
    flat = np.zeros(grad_block.size, dtype=np.float64)
    size = grad_block.size
    for yy, xx, ww in ((y_lo, x_lo, w1), (y_lo, x_hi, w2), (y_hi, x_lo, w3), (y_hi, x_hi, w4)):
        idx = np.broadcast_to((base + yy) * width + xx, sx.shape)
        flat += np.bincount(idx.ravel(), weights=(ww * g).ravel(), minlength=size)
    grad_block += flat.reshape(grad_block.shape).astype(grad_block.dtype, copy=False)


def _backward_numpy(grad_out, arg_k, arg_x, arg_y, grad_in):
    c = grad_out.shape[1] // 5
    grad_in[:, :c] += grad_out[:, :c]
    for border in range(4):
        sl = slice((border + 1) * c, (border + 2) * c)
        valid = arg_k[:, border] >= 0
        g = np.where(valid, grad_out[:, sl], 0.0)
        _scatter_bilinear(grad_in[:, sl], arg_x[:, border], arg_y[:, border], g)


def _avg_backward(grad_out, boxes, n, grad_in):
    c = grad_out.shape[1] // 5
    grad_in[:, :c] += grad_out[:, :c]
    for border in range(4):
        sl = slice((border + 1) * c, (border + 2) * c)
        sx, sy = _np_border_coords(boxes, border, n)  # (b, h, w, n)
        g = grad_out[:, sl].astype(np.float64)[..., None] / n  # (b, c, h, w, 1)
        _scatter_bilinear(grad_in[:, sl], np.broadcast_to(sx[:, None], g.shape[:4] + (n,)),
                          np.broadcast_to(sy[:, None], g.shape[:4] + (n,)), g)


# ---------------------------------------------------------------------------
# public entry points

def border_align_forward(inp: np.ndarray, boxes: np.ndarray, cfg: PoolConfig = PoolConfig(),
                         use_numba: bool | None = None):
    """Pool border features. Returns ``(output, ArgmaxRecord)``.

    ``boxes`` has shape (b, 4, h, w) with (x0, y0, x1, y1) per location.
    """
    _check(inp, boxes)
    use_numba = USE_NUMBA if use_numba is None else use_numba
    nb, c5, height, width = inp.shape
    c = c5 // 5
    n = cfg.pool_size
    out = np.zeros_like(inp)
    arg_k = np.full((nb, 4, c, height, width), -1, dtype=np.int32)
    arg_x = np.zeros((nb, 4, c, height, width), dtype=np.float64)
    arg_y = np.zeros_like(arg_x)
    if n == 0:
        out[:, :c] = inp[:, :c]
    elif cfg.aggregation == "max" and use_numba:
        _forward_numba(np.ascontiguousarray(inp), np.ascontiguousarray(boxes), n, out, arg_k, arg_x, arg_y)
    else:
        _forward_numpy(inp, boxes, n, out, arg_k, arg_x, arg_y, cfg.aggregation)
    rec = ArgmaxRecord(arg_k, arg_x, arg_y, n, inp.shape, cfg.aggregation)
    return out, rec


def border_align_backward(grad_out: np.ndarray, rec: ArgmaxRecord, boxes: np.ndarray | None = None,
                          input_shape=None, use_numba: bool | None = None) -> np.ndarray:
    """Route upstream gradient to the grid neighbours of each winning sample.

    Box coordinates receive no gradient. ``boxes`` is only needed for the
    average-pooling ablation mode, which has no per-slot winner.
    """
    input_shape = tuple(input_shape or rec.input_shape)
    if grad_out.shape != input_shape or tuple(rec.input_shape) != input_shape:
        raise ShapeError(f"gradient shape {grad_out.shape} does not match record {rec.input_shape}")
    use_numba = USE_NUMBA if use_numba is None else use_numba
    grad_in = np.zeros(input_shape, dtype=grad_out.dtype)
    if rec.pool_size == 0:
        c = input_shape[1] // 5
        grad_in[:, :c] = grad_out[:, :c]
    elif rec.aggregation == "avg":
        if boxes is None:
            raise ValueError("average-pooling backward needs the boxes")
        _avg_backward(grad_out, boxes, rec.pool_size, grad_in)
    elif use_numba:
        _backward_numba(np.ascontiguousarray(grad_out), rec.index, rec.x, rec.y, grad_in)
    else:
        _backward_numpy(grad_out, rec.index, rec.x, rec.y, grad_in)
    return grad_in


def border_align(inp, boxes, pool_size=10):
    return border_align_forward(inp, boxes, PoolConfig(pool_size))[0]
