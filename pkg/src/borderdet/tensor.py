"""Dense 4-D tensors, layer parameters and the TNS4 on-disk format.

A Tensor4 is a C-contiguous numpy array of shape (batch, channels, height,
width) in float32 (training) or float64 (verification). Operations never
mutate their inputs.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PRECISIONS = {"f32": np.float32, "f64": np.float64}

TNS4_MAGIC = b"TNS4"
_TNS4_HEADER = struct.Struct("<4s4I")


class ShapeError(ValueError):
    """Raised when tensor shapes do not satisfy an operation's contract."""


def dtype_for(precision: str):
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}") from None


def as_tensor4(x, dtype=None) -> np.ndarray:
    """Validate and return ``x`` as a contiguous 4-D float array."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if arr.ndim != 4:
        raise ShapeError(f"expected a 4-D (b, c, h, w) tensor, got shape {arr.shape}")
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


@dataclass
class LayerParams:
    """Learnable weight/bias pair with gradient buffers of identical shape."""

    weight: np.ndarray
    bias: np.ndarray
    grad_weight: np.ndarray = field(init=False)
    grad_bias: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad_weight = np.zeros_like(self.weight)
        self.grad_bias = np.zeros_like(self.bias)

    def zero_grad(self):
        self.grad_weight[...] = 0
        self.grad_bias[...] = 0

    def astype(self, dtype) -> "LayerParams":
        return LayerParams(self.weight.astype(dtype), self.bias.astype(dtype))

    @property
    def out_channels(self) -> int:
        return self.bias.shape[0]


def bilinear_sample(input: np.ndarray, b: int, c: int, x: float, y: float) -> float:
    """Bilinearly interpolate ``input[b, c]`` at continuous (x, y).

    Coordinates are clamped to the grid rectangle [0, W-1] x [0, H-1], so
    points outside the map read the nearest edge value.
    """
    _, _, height, width = input.shape
    plane = input[b, c]  # IndexError on a bad b/c is the contract
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
    lx = x - x_lo
    ly = y - y_lo
    # lerp form: exact at grid points and on constant fields
    v00, v01 = float(plane[y_lo, x_lo]), float(plane[y_lo, x_hi])
    v10, v11 = float(plane[y_hi, x_lo]), float(plane[y_hi, x_hi])
    top = v00 + lx * (v01 - v00)
    bottom = v10 + lx * (v11 - v10)
    return top + ly * (bottom - top)


def save_tensor(path, tensor: np.ndarray) -> None:
    """Write a tensor as a TNS4 file: 20-byte header then little-endian f32 payload."""
    arr = np.asarray(tensor)
    if arr.ndim != 4:
        raise ShapeError(f"TNS4 stores exactly four dims, got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tensor, _ = tensor_from_bytes(data)
    return tensor


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    header = _TNS4_HEADER.pack(TNS4_MAGIC, *(int(d) for d in arr.shape))
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def tensor_from_bytes(data: bytes, offset: int = 0):
    """Decode one TNS4 record starting at ``offset``; returns (tensor, next_offset)."""
    if len(data) - offset < _TNS4_HEADER.size:
        raise ValueError("truncated TNS4 header")
    magic, *dims = _TNS4_HEADER.unpack_from(data, offset)
    if magic != TNS4_MAGIC:
        raise ValueError(f"bad TNS4 magic {magic!r}")
    offset += _TNS4_HEADER.size
    count = int(np.prod(dims))
    end = offset + 4 * count
    if end > len(data):
        raise ValueError("truncated TNS4 payload")
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(dims)
    return arr.astype(np.float32), end
