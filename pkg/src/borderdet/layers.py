"""Differentiable layer primitives with explicit forward/backward pairs.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
consumes the upstream gradient plus that cache, returns the input gradient
and accumulates parameter gradients into the ``LayerParams`` buffers.
"""
from __future__ import annotations

import numpy as np

from .tensor import LayerParams, ShapeError

IN_EPS = 1e-5


class DegeneratePlaneError(ValueError):
    """Instance norm was asked to normalize a plane with a single element."""


def init_conv(rng: np.random.Generator, in_ch: int, out_ch: int, kernel: int,
              dtype=np.float32, gain: float = 2.0) -> LayerParams:
    """Zero-mean uniform init scaled by fan-in; zero bias."""
    fan_in = in_ch * kernel * kernel
    bound = np.sqrt(3.0 * gain / fan_in)
    weight = rng.uniform(-bound, bound, size=(out_ch, in_ch, kernel, kernel))
    return LayerParams(weight.astype(dtype), np.zeros(out_ch, dtype=dtype))


def init_norm(channels: int, dtype=np.float32) -> LayerParams:
    return LayerParams(np.ones(channels, dtype=dtype), np.zeros(channels, dtype=dtype))


# ---------------------------------------------------------------------------
# convolution

def conv2d_forward(x: np.ndarray, params: LayerParams, stride: int = 1, padding: int | None = None):
    out_ch, in_ch, kh, kw = params.weight.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"kernel must be 1x1 or 3x3, got {kh}x{kw}")
    if x.ndim != 4 or x.shape[1] != in_ch:
        raise ShapeError(f"input has {x.shape[1] if x.ndim == 4 else '?'} channels, weight expects {in_ch}")
    k = kh
    if padding is None:
        padding = k // 2
    b, _, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if k == 1:
        cols = xp[:, :, : stride * ho : stride, : stride * wo : stride].transpose(0, 2, 3, 1)
    else:
        taps = [xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
                for i in range(k) for j in range(k)]
        # (b, c, k*k, ho, wo) -> (b, ho, wo, c*k*k) matching weight.reshape(out, -1)
        cols = np.stack(taps, axis=2).transpose(0, 3, 4, 1, 2)
    cols = np.ascontiguousarray(cols).reshape(b * ho * wo, in_ch * k * k)
    wmat = params.weight.reshape(out_ch, -1)
    out = cols @ wmat.T + params.bias
    out = np.ascontiguousarray(out.reshape(b, ho, wo, out_ch).transpose(0, 3, 1, 2))
    cache = (cols, x.shape, stride, padding, k)
    return out, cache


def conv2d_backward(grad_out: np.ndarray, cache, params: LayerParams) -> np.ndarray:
    cols, in_shape, stride, padding, k = cache
    b, in_ch, h, w = in_shape
    out_ch = params.weight.shape[0]
    _, _, ho, wo = grad_out.shape
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, out_ch)
    params.grad_weight += (g.T @ cols).reshape(params.weight.shape)
    params.grad_bias += g.sum(axis=0)
    dcols = (g @ params.weight.reshape(out_ch, -1)).reshape(b, ho, wo, in_ch, k * k)
    if k == 1 and stride == 1 and padding == 0:
        return np.ascontiguousarray(dcols[..., 0].transpose(0, 3, 1, 2))
    dxp = np.zeros((b, in_ch, h + 2 * padding, w + 2 * padding), dtype=grad_out.dtype)
    dcols = dcols.transpose(0, 3, 4, 1, 2)  # (b, c, k*k, ho, wo)
    for t in range(k * k):
        i, j = divmod(t, k)
        dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, t]
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(dxp)


def conv2d(x, params, kernel=None, padding=None, stride=1):
    """Forward-only convenience wrapper."""
    if kernel is not None and params.weight.shape[-1] != kernel:
        raise ShapeError(f"weight kernel {params.weight.shape[-1]} != requested {kernel}")
    return conv2d_forward(x, params, stride=stride, padding=padding)[0]


# ---------------------------------------------------------------------------
# instance normalization

def instance_norm_forward(x: np.ndarray, params: LayerParams | None = None, eps: float = IN_EPS):
    b, c, h, w = x.shape
    if h * w < 2:
        raise DegeneratePlaneError("instance norm needs at least two elements per plane")
    mean = x.mean(axis=(2, 3), keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    if params is None:
        out = xhat
    else:
        out = xhat * params.weight[None, :, None, None] + params.bias[None, :, None, None]
    return out, (xhat, inv_std)


def instance_norm_backward(grad_out: np.ndarray, cache, params: LayerParams | None = None) -> np.ndarray:
    xhat, inv_std = cache
    if params is not None:
        params.grad_weight += (grad_out * xhat).sum(axis=(0, 2, 3))
        params.grad_bias += grad_out.sum(axis=(0, 2, 3))
        dxhat = grad_out * params.weight[None, :, None, None]
    else:
        dxhat = grad_out
    mean_d = dxhat.mean(axis=(2, 3), keepdims=True)
    mean_dx = (dxhat * xhat).mean(axis=(2, 3), keepdims=True)
    return inv_std * (dxhat - mean_d - xhat * mean_dx)


def instance_norm(x, eps=IN_EPS, params=None):
    return instance_norm_forward(x, params, eps)[0]


# ---------------------------------------------------------------------------
# pointwise

def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(grad_out, mask):
    return np.where(mask, grad_out, 0).astype(grad_out.dtype, copy=False)


def relu(x):
    return relu_forward(x)[0]


def softplus(x):
    return np.logaddexp(0, x).astype(x.dtype, copy=False)


def sigmoid(x):
    # split form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
