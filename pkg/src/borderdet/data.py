"""Synthetic shapes dataset: rectangles (class 0) and ellipses (class 1) on noise.

Every object carries its exact box and four extreme points in (left, top,
right, bottom) order. Ellipse extremes are the axis endpoints; rectangles
use side midpoints by convention. Objects never overlap, so boxes and
extremes stay exact after rendering.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .targets import GroundTruth
from .tensor import load_tensor, save_tensor

RECTANGLE, ELLIPSE = 0, 1
MANIFEST = "manifest.json"
_SUPERSAMPLE = 4


@dataclass
class Dataset:
    images: np.ndarray  # (n, channels, size, size) float32
    gts: list

    def __len__(self):
        return len(self.gts)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], [self.gts[i] for i in idx])


def ellipse_geometry(cx, cy, rx, ry):
    """Box and (L, T, R, B) extreme points of an axis-aligned ellipse."""
    box = np.array([cx - rx, cy - ry, cx + rx, cy + ry], dtype=np.float64)
    extremes = np.array([[cx - rx, cy], [cx, cy - ry], [cx + rx, cy], [cx, cy + ry]], dtype=np.float64)
    return box, extremes


def rectangle_geometry(x0, y0, x1, y1):
    box = np.array([x0, y0, x1, y1], dtype=np.float64)
    mx, my = (x0 + x1) / 2, (y0 + y1) / 2
    extremes = np.array([[x0, my], [mx, y0], [x1, my], [mx, y1]], dtype=np.float64)
    return box, extremes


def _rect_coverage(size, box):
    """Exact per-pixel area coverage of an axis-aligned rectangle."""
    edges = np.arange(size, dtype=np.float64)
    cov_x = np.clip(np.minimum(edges + 1, box[2]) - np.maximum(edges, box[0]), 0, 1)
    cov_y = np.clip(np.minimum(edges + 1, box[3]) - np.maximum(edges, box[1]), 0, 1)
    return cov_y[:, None] * cov_x[None, :]


def _ellipse_coverage(size, cx, cy, rx, ry):
    s = _SUPERSAMPLE
    offs = (np.arange(s) + 0.5) / s
    coords = (np.arange(size)[:, None] + offs[None, :]).reshape(-1)
    u = ((coords - cx) / rx) ** 2
    v = ((coords - cy) / ry) ** 2
    inside = (v[:, None] + u[None, :]) <= 1.0
    return inside.reshape(size, s, size, s).mean(axis=(1, 3))


def _sample_image(rng, size, channels, min_side, max_side, max_objects):
    background = rng.uniform(0.0, 0.4, size=channels)
    img = background[:, None, None] + rng.normal(0.0, 0.08, size=(channels, size, size))
    n_obj = int(rng.integers(1, max_objects + 1))
    classes, boxes, extremes = [], [], []
    for _ in range(n_obj):
        for _attempt in range(50):
            cls = int(rng.integers(0, 2))
            w, h = rng.uniform(min_side, max_side, size=2)
            x0 = rng.uniform(0, size - w)
            y0 = rng.uniform(0, size - h)
            if cls == ELLIPSE:
                box, ext = ellipse_geometry(x0 + w / 2, y0 + h / 2, w / 2, h / 2)
            else:
                box, ext = rectangle_geometry(x0, y0, x0 + w, y0 + h)
            # one pixel of clearance keeps shapes from touching
            if all(box[0] > b[2] + 1 or box[2] < b[0] - 1 or box[1] > b[3] + 1 or box[3] < b[1] - 1 for b in boxes):
                break
        else:
            continue
        if cls == ELLIPSE:
            cov = _ellipse_coverage(size, (box[0] + box[2]) / 2, (box[1] + box[3]) / 2, w / 2, h / 2)
        else:
            cov = _rect_coverage(size, box)
        color = rng.uniform(0.55, 1.0, size=channels)
        img = img * (1 - cov) + color[:, None, None] * cov
        classes.append(cls)
        boxes.append(box)
        extremes.append(ext)
    gt = GroundTruth(np.array(classes, dtype=np.int64), np.array(boxes).reshape(-1, 4),
                     np.array(extremes).reshape(-1, 4, 2))
    return img.astype(np.float32), gt


def generate_synthetic_dataset(seed: int, n_images: int, image_size: int = 64, classes: int = 2,
                               channels: int = 3, min_side: float | None = None,
                               max_side: float | None = None, max_objects: int = 3) -> Dataset:
    """Deterministic per ``seed``: same arguments give a bitwise-identical dataset."""
    if image_size < 32:
        raise ValueError("image_size must be >= 32")
    if classes != 2:
        raise ValueError("the shapes generator has exactly two classes")
    min_side = image_size * 0.22 if min_side is None else min_side
    max_side = image_size * 0.6 if max_side is None else max_side
    rng = np.random.default_rng(seed)
    images = np.empty((n_images, channels, image_size, image_size), dtype=np.float32)
    gts = []
    for n in range(n_images):
        images[n], gt = _sample_image(rng, image_size, channels, min_side, max_side, max_objects)
        gts.append(gt)
    return Dataset(images, gts)


def save_dataset(dataset: Dataset, directory) -> Path:
    """Write one TNS4 file per image plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    records = []
    for n, (img, gt) in enumerate(zip(dataset.images, dataset.gts)):
        name = f"img_{n:05d}.tns"
        save_tensor(directory / name, img[None])
        records.append({
            "image": name,
            "objects": [
                {"class": int(c), "box": [float(v) for v in b], "extreme_points": [[float(x), float(y)] for x, y in e]}
                for c, b, e in zip(gt.classes, gt.boxes, gt.extremes)
            ],
        })
    with open(directory / MANIFEST, "w") as fh:
        json.dump({"records": records}, fh, indent=1)
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    with open(manifest) as fh:
        records = json.load(fh)["records"]
    images, gts = [], []
    for rec in records:
        images.append(load_tensor(directory / rec["image"])[0])
        objs = rec["objects"]
        gts.append(GroundTruth(
            np.array([o["class"] for o in objs], dtype=np.int64),
            np.array([o["box"] for o in objs], dtype=np.float64).reshape(-1, 4),
            np.array([o["extreme_points"] for o in objs], dtype=np.float64).reshape(-1, 4, 2),
        ))
    return Dataset(np.stack(images) if images else np.zeros((0, 3, 0, 0), np.float32), gts)
