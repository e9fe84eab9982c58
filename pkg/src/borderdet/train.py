"""SGD training loop, batched inference and the BDET checkpoint format."""
from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .data import Dataset, load_dataset
from .detector import BorderDet, HeadOutputs, postprocess
from .evaluate import evaluate
from .losses import LossResult, total_loss
from .targets import assign_border_targets, assign_coarse_targets
from .tensor import tensor_from_bytes, tensor_to_bytes

log = logging.getLogger(__name__)

CKPT_MAGIC = b"BDET"
CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model: BorderDet) -> None:
    """BDET magic, u32 version, u32 entry count, then (u16 name length, name, TNS4 tensor) entries."""
    entries = []
    for name, p in model.named_params().items():
        entries.append((f"{name}.weight", p.weight))
        entries.append((f"{name}.bias", p.bias))
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(entries))]
    for name, arr in entries:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(tensor_to_bytes(_as4d(arr)))
    Path(path).write_bytes(b"".join(chunks))


def _as4d(arr):
    arr = np.asarray(arr)
    return arr.reshape((1,) * (4 - arr.ndim) + arr.shape)


def read_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a BDET checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 12
    table = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset:offset + n].decode("utf-8")
        offset += n
        table[name], offset = tensor_from_bytes(data, offset)
    return table


def load_checkpoint(path, cfg: Config) -> BorderDet:
    table = read_checkpoint(path)
    model = BorderDet(cfg)
    for name, p in model.named_params().items():
        p.weight[...] = table[f"{name}.weight"].reshape(p.weight.shape)
        p.bias[...] = table[f"{name}.bias"].reshape(p.bias.shape)
    return model


# ---------------------------------------------------------------------------
# optimization

class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: dict, momentum=0.9, weight_decay=1e-4):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: (np.zeros_like(p.weight), np.zeros_like(p.bias)) for name, p in params.items()}

    def step(self, lr: float):
        for name, p in self.params.items():
            vw, vb = self.velocity[name]
            for value, grad, vel in ((p.weight, p.grad_weight, vw), (p.bias, p.grad_bias, vb)):
                vel *= self.momentum
                vel += grad + self.weight_decay * value
                value -= lr * vel


def learning_rate(cfg: Config, it: int) -> float:
    """Step-decayed LR at 1-based iteration ``it`` with optional linear warmup."""
    lr = cfg.lr * cfg.lr_decay ** sum(it > s for s in cfg.lr_steps)
    if cfg.warmup_iters and it <= cfg.warmup_iters:
        lr *= it / cfg.warmup_iters
    return lr


def clip_gradients(params: dict, max_norm: float) -> float:
    sq = sum(float((p.grad_weight.astype(np.float64) ** 2).sum() + (p.grad_bias.astype(np.float64) ** 2).sum())
             for p in params.values())
    norm = sq ** 0.5
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params.values():
            p.grad_weight *= scale
            p.grad_bias *= scale
    return norm


def compute_loss(model: BorderDet, images, gts, coarse_targets=None, boxes_override=None):
    """Forward pass plus the four-term loss. Returns (LossResult, outputs, cache, border targets)."""
    cfg = model.cfg
    out, cache = model.forward(images, boxes_override)
    fh, fw = out.coarse_cls_logits.shape[2:]
    if coarse_targets is None:
        labels_c, dist_c, _ = assign_coarse_targets(gts, fh, fw, cfg.stride)
    else:
        labels_c, dist_c = coarse_targets
    bt = assign_border_targets(out.coarse_boxes, gts, cfg.border_iou_thresh, cfg.sigma)
    res = total_loss(out.coarse_cls_logits, out.coarse_reg, out.border_cls_logits, out.border_offsets,
                     labels_c, dist_c, bt.labels, bt.offsets, cfg.focal_alpha, cfg.focal_gamma)
    return res, out, cache, bt


@dataclass
class TrainResult:
    model: BorderDet
    log: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)  # iteration -> checkpoint path


def train(cfg: Config, data=None, out_dir=None, val: Dataset | None = None, progress=None) -> TrainResult:
    """Train a detector. ``data`` is a Dataset or a dataset directory.

    Writes ``metrics.jsonl``, ``config.json`` and checkpoints into ``out_dir``
    when given. Checkpoints are also written at every iteration listed in
    ``cfg.snapshot_iters``.
    """
    if data is None or isinstance(data, (str, Path)):
        if data is None:
            raise FileNotFoundError("no training dataset given")
        data = load_dataset(data)
    if len(data) == 0:
        raise ValueError("training dataset is empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.save(out_dir / "config.json")

    model = BorderDet(cfg)
    params = model.named_params()
    opt = SGD(params, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    fs = cfg.feature_size
    labels_all, dist_all, _ = assign_coarse_targets(data.gts, fs, fs, cfg.stride)
    images_all = data.images.astype(model.dtype)

    result = TrainResult(model)
    metrics_fh = open(out_dir / "metrics.jsonl", "w") if out_dir is not None else None
    perm = rng.permutation(len(data))
    cursor = 0
    t0 = time.perf_counter()
    try:
        for it in range(1, cfg.iters + 1):
            if cursor + cfg.batch_size > len(perm):
                perm = rng.permutation(len(data))
                cursor = 0
            idx = np.sort(perm[cursor:cursor + cfg.batch_size])
            cursor += cfg.batch_size

            model.zero_grad()
            res, out, cache, _ = compute_loss(model, images_all[idx], [data.gts[i] for i in idx],
                                              (labels_all[idx], dist_all[idx]))
            model.backward(res.grads, cache)
            gnorm = clip_gradients(params, cfg.grad_clip)
            lr = learning_rate(cfg, it)
            opt.step(lr)

            entry = {"iter": it, "loss": res.total, "lr": lr, "grad_norm": gnorm,
                     "n_pos_coarse": res.n_pos_coarse, "n_pos_border": res.n_pos_border, **res.terms}
            result.log.append(entry)
            if metrics_fh:
                metrics_fh.write(json.dumps(entry) + "\n")
            if cfg.log_interval and it % cfg.log_interval == 0:
                log.info("iter %d loss %.4f (%s) lr %.4g %.1fs", it, res.total,
                         ", ".join(f"{k} {v:.3f}" for k, v in res.terms.items()), lr, time.perf_counter() - t0)
            if progress is not None:
                progress(it, entry)
            if it in cfg.snapshot_iters and out_dir is not None:
                path = out_dir / f"ckpt_{it:06d}.bdet"
                save_checkpoint(path, model)
                result.snapshots[it] = path
            if val is not None and cfg.eval_interval and it % cfg.eval_interval == 0:
                ev = {"iter": it, **{m: r.to_dict() for m, r in evaluate_model(model, val).items()}}
                result.evals.append(ev)
                if metrics_fh:
                    metrics_fh.write(json.dumps({"eval": ev}) + "\n")
    finally:
        if metrics_fh:
            metrics_fh.close()
    if out_dir is not None:
        save_checkpoint(out_dir / "model.bdet", model)
    return result


# ---------------------------------------------------------------------------
# inference helpers

def run_model(model: BorderDet, images, batch_size=50) -> HeadOutputs:
    """Forward a large image stack in chunks and concatenate the head outputs."""
    parts = []
    for s in range(0, len(images), batch_size):
        out, _ = model.forward(images[s:s + batch_size])
        parts.append(out)
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    return HeadOutputs(cat("coarse_cls_logits"), cat("coarse_reg"), cat("border_cls_logits"),
                       cat("border_offsets"), cat("coarse_boxes"), _cat_records([p.cls_record for p in parts]),
                       _cat_records([p.reg_record for p in parts]))


def _cat_records(recs):
    from .border_align import ArgmaxRecord
    first = recs[0]
    index = np.concatenate([r.index for r in recs])
    shape = (index.shape[0],) + tuple(first.input_shape[1:])
    return ArgmaxRecord(index, np.concatenate([r.x for r in recs]), np.concatenate([r.y for r in recs]),
                        first.pool_size, shape, first.aggregation)


def evaluate_model(model: BorderDet, dataset: Dataset, out: HeadOutputs | None = None) -> dict:
    """EvalReport for the coarse-only and the refined predictions of one forward pass."""
    out = run_model(model, dataset.images) if out is None else out
    return {mode: evaluate(postprocess(out, model.cfg, mode), dataset.gts, model.cfg.num_classes)
            for mode in ("coarse", "refined")}
