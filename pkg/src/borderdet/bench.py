"""Wall-clock timings of the hot ops: warmup, then the median over repeats."""
from __future__ import annotations

import csv
import statistics
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import layers
from ._jit import HAS_NUMBA
from .bam import BamParams, bam_forward
from .border_align import PoolConfig, border_align_backward, border_align_forward
from .config import Config
from .detector import BorderDet

DEFAULT_POOL_SIZES = (0, 2, 4, 10, 32)


@dataclass
class BenchRow:
    op: str
    backend: str
    batch: int
    channels: int
    size: int
    pool_size: int
    median_ms: float
    repeats: int


def time_call(fn, repeats=5, warmup=1) -> float:
    """Median wall time of ``fn()`` in milliseconds."""
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def _border_inputs(batch, channels, size, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(batch, 5 * channels, size, size)).astype(np.float32)
    lo = rng.uniform(-1, size, size=(batch, 2, size, size))
    boxes = np.concatenate([lo, lo + rng.uniform(0, size / 2, size=(batch, 2, size, size))], axis=1)
    return x, boxes.astype(np.float32)


def _bench_border_forward(batch, channels, size, n, use_numba):
    x, boxes = _border_inputs(batch, channels, size)
    cfg = PoolConfig(n)
    return lambda: border_align_forward(x, boxes, cfg, use_numba=use_numba)


def _bench_border_backward(batch, channels, size, n, use_numba):
    x, boxes = _border_inputs(batch, channels, size)
    _, rec = border_align_forward(x, boxes, PoolConfig(n), use_numba=use_numba)
    g = np.ones_like(x)
    return lambda: border_align_backward(g, rec, use_numba=use_numba)


def _bench_bam(batch, channels, size, n, use_numba):
    rng = np.random.default_rng(0)
    params = BamParams.init(rng, channels, np.float32)
    feat = rng.normal(size=(batch, channels, size, size)).astype(np.float32)
    _, boxes = _border_inputs(batch, channels, size)
    return lambda: bam_forward(feat, boxes, params, PoolConfig(n))


def _bench_conv(batch, channels, size, n, use_numba):
    rng = np.random.default_rng(0)
    params = layers.init_conv(rng, channels, channels, 3, np.float32)
    x = rng.normal(size=(batch, channels, size, size)).astype(np.float32)
    return lambda: layers.conv2d_forward(x, params)


def _bench_detector(batch, channels, size, n, use_numba):
    model = BorderDet(Config(pool_size=n))
    images = np.random.default_rng(0).normal(size=(batch, 3, 64, 64)).astype(np.float32)
    return lambda: model.forward(images)


# op name -> (factory, compares backends)
OPS = {
    "border_align_forward": (_bench_border_forward, True),
    "border_align_backward": (_bench_border_backward, True),
    "bam_forward": (_bench_bam, False),
    "conv3x3": (_bench_conv, False),
    "detector_forward": (_bench_detector, False),
}


def bench(ops=None, batches=(8,), channels=32, size=8, pool_sizes=DEFAULT_POOL_SIZES, repeats=5,
          warmup=1) -> list:
    """Time each op over the batch x pool-size grid. Unknown op names raise ``KeyError``."""
    ops = list(OPS) if not ops else list(ops)
    unknown = [o for o in ops if o not in OPS]
    if unknown:
        raise KeyError(f"unknown op(s) {unknown}; choose from {sorted(OPS)}")
    rows = []
    for op in ops:
        factory, dual = OPS[op]
        backends = [("numba", True), ("numpy", False)] if dual and HAS_NUMBA else [("default", None)]
        for batch in batches:
            for n in pool_sizes:
                for label, flag in backends:
                    fn = factory(batch, channels, size, n, flag)
                    ms = time_call(fn, repeats, warmup)
                    rows.append(BenchRow(op, label, batch, channels, size, n, ms, repeats))
    return rows


def write_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(BenchRow.__dataclass_fields__))
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))
