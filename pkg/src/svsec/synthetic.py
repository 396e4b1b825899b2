"""Generated class-folder datasets of simple geometric patterns."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .tensor_core import Rng

PATTERNS = ("hstripes", "vstripes", "diagonal", "checker", "disk", "ring", "square", "cross")


def pattern_image(kind: str, side: int, rng: Rng) -> np.ndarray:
    """One ``[3, side, side]`` float32 image in [0, 1] with small random jitter."""
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) / side
    cy, cx = 0.5 + rng.uniform(-0.08, 0.08, 2)
    r = np.hypot(yy - cy, xx - cx)
    phase = rng.uniform(0, 1)
    period = 0.25
    if kind == "hstripes":
        m = ((yy / period + phase) % 1.0) < 0.5
    elif kind == "vstripes":
        m = ((xx / period + phase) % 1.0) < 0.5
    elif kind == "diagonal":
        m = (((xx + yy) / period + phase) % 1.0) < 0.5
    elif kind == "checker":
        m = (np.floor(xx / period + phase) + np.floor(yy / period + phase)) % 2 == 0
    elif kind == "disk":
        m = r < 0.25
    elif kind == "ring":
        m = (r > 0.2) & (r < 0.32)
    elif kind == "square":
        m = (np.abs(yy - cy) < 0.22) & (np.abs(xx - cx) < 0.22)
    elif kind == "cross":
        m = (np.abs(yy - cy) < 0.07) | (np.abs(xx - cx) < 0.07)
    else:
        raise ValueError(f"unknown pattern {kind!r}")
    fg = np.array([0.85, 0.35, 0.3]) + rng.uniform(-0.1, 0.1, 3)
    bg = np.array([0.25, 0.2, 0.3]) + rng.uniform(-0.05, 0.05, 3)
    img = np.where(m[None], fg[:, None, None], bg[:, None, None])
    img = img + rng.normal(0.0, 0.03, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_arrays(num_classes: int = 8, per_class: int = 8, side: int = 96, seed: int = 0):
    """Return ``(images [N,3,side,side], labels [N], ids)``, class-major order."""
    if num_classes > len(PATTERNS):
        raise ValueError(f"at most {len(PATTERNS)} pattern classes are available")
    rng = Rng(seed)
    images, labels, ids = [], [], []
    for k in range(num_classes):
        for i in range(per_class):
            images.append(pattern_image(PATTERNS[k], side, rng))
            labels.append(k)
            ids.append(f"{k}_{PATTERNS[k]}/{i:04d}.png")
    return np.stack(images), np.asarray(labels), ids


def write_dataset(root, num_classes: int = 8, per_class: int = 8, side: int = 96, seed: int = 0) -> Path:
    """Write PNG files under ``root/<k>_<pattern>/``."""
    from PIL import Image

    root = Path(root)
    images, _, ids = make_arrays(num_classes, per_class, side, seed)
    for img, rel in zip(images, ids):
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        pixels = np.round(img.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        Image.fromarray(pixels, mode="RGB").save(path)
    return root
