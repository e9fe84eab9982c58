"""Run configuration, loadable from and savable to JSON."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field


@dataclass
class Config:
    # data
    image_size: int = 64
    num_classes: int = 2
    n_train: int = 500
    n_val: int = 100
    data_seed: int = 7
    # model; stride is 2 ** len(backbone_channels)
    in_channels: int = 3
    backbone_channels: tuple = (16, 32, 32)
    cls_channels: int = 32
    reg_channels: int = 16
    pool_size: int = 10
    aggregation: str = "max"
    sigma: float = 0.5
    # assignment and inference
    border_iou_thresh: float = 0.6
    nms_thresh: float = 0.6
    score_thresh: float = 0.05
    pre_nms_top_n: int = 1000
    max_detections: int = 100
    # loss
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    # optimization
    iters: int = 2000
    batch_size: int = 8
    lr: float = 0.01
    lr_steps: tuple = (1400, 1800)
    lr_decay: float = 0.1
    warmup_iters: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    grad_clip: float = 0.0
    seed: int = 7
    precision: str = "f32"
    # logging
    log_interval: int = 50
    eval_interval: int = 0
    snapshot_iters: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.backbone_channels = tuple(self.backbone_channels)
        self.lr_steps = tuple(self.lr_steps)
        self.snapshot_iters = tuple(self.snapshot_iters)
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        if self.pool_size < 0:
            raise ValueError("pool_size must be >= 0")
        if self.precision not in ("f32", "f64"):
            raise ValueError("precision must be 'f32' or 'f64'")

    @property
    def stride(self) -> int:
        return 2 ** len(self.backbone_channels)

    @property
    def feature_size(self) -> int:
        return self.image_size // self.stride

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Config":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
