"""Border Alignment Module: expand to 5C border-sensitive channels, pool borders, reduce to C."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from .border_align import ArgmaxRecord, PoolConfig, border_align_backward, border_align_forward
from .tensor import LayerParams, ShapeError


class StaleCacheError(RuntimeError):
    """A forward cache was reused or paired with different parameters."""


@dataclass
class BamParams:
    expand: LayerParams  # C -> 5C, 1x1
    norm: LayerParams    # instance-norm affine over 5C
    reduce: LayerParams  # 5C -> C, 1x1

    def __post_init__(self):
        if self.expand.out_channels != 5 * self.reduce.out_channels:
            raise ShapeError("expand must produce exactly 5x the reduced channel count")

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, dtype=np.float32) -> "BamParams":
        return cls(
            expand=layers.init_conv(rng, channels, 5 * channels, 1, dtype, gain=1.0),
            norm=layers.init_norm(5 * channels, dtype),
            reduce=layers.init_conv(rng, 5 * channels, channels, 1, dtype, gain=1.0),
        )

    def named(self, prefix: str):
        return {f"{prefix}.expand": self.expand, f"{prefix}.norm": self.norm, f"{prefix}.reduce": self.reduce}


@dataclass
class BamCache:
    expand: tuple
    norm: tuple
    pooled_shape: tuple
    record: ArgmaxRecord
    reduce: tuple
    boxes: np.ndarray
    params_id: int
    used: bool = False


def bam_forward(feat: np.ndarray, boxes: np.ndarray, params: BamParams, cfg: PoolConfig = PoolConfig()):
    """reduce(border_align(instance_norm(expand(feat)), boxes)); output has feat's shape."""
    expanded, c_expand = layers.conv2d_forward(feat, params.expand, padding=0)
    normed, c_norm = layers.instance_norm_forward(expanded, params.norm)
    pooled, record = border_align_forward(normed, boxes, cfg)
    out, c_reduce = layers.conv2d_forward(pooled, params.reduce, padding=0)
    return out, BamCache(c_expand, c_norm, pooled.shape, record, c_reduce, boxes, id(params))


def bam_backward(grad_out: np.ndarray, cache: BamCache, params: BamParams) -> np.ndarray:
    """Accumulate parameter gradients and return d loss / d feat. Each cache is single-use."""
    if cache.used or cache.params_id != id(params):
        raise StaleCacheError("BAM cache already consumed or built for other parameters")
    cache.used = True
    g = layers.conv2d_backward(grad_out, cache.reduce, params.reduce)
    g = border_align_backward(g, cache.record, cache.boxes)
    g = layers.instance_norm_backward(g, cache.norm, params.norm)
    return layers.conv2d_backward(g, cache.expand, params.expand)
