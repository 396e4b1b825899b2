"""Class-folder dataset ingestion, stratified splits, image decoding and batching.

Dataset layout: ``<root>/<class-name>/*.jpg|jpeg|png``. Label ids follow the
lexicographic order of class folder names.

Manifest files hold one item per line, ``split<TAB>label<TAB>relative-path``,
preceded by ``#`` header lines recording the dataset root, seed and class
names.
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .tensor_core import Rng

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")
SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.60, 0.25, 0.15)


@dataclass
class DatasetCatalog:
    root: Path
    classes: list
    files: dict  # class name -> sorted relative paths

    def __len__(self) -> int:
        return sum(len(v) for v in self.files.values())

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def items(self) -> list:
        return [(rel, label) for label, name in enumerate(self.classes) for rel in self.files[name]]


@dataclass
class SplitManifest:
    seed: int
    classes: list
    splits: dict = field(default_factory=dict)  # split -> [(relpath, label)]
    root: Path | None = None

    def counts(self) -> dict:
        """``{split: [count per class]}``."""
        out = {}
        for name, items in self.splits.items():
            c = [0] * len(self.classes)
            for _, label in items:
                c[label] += 1
            out[name] = c
        return out

    def to_text(self) -> str:
        lines = ["# svsec manifest v1"]
        if self.root is not None:
            lines.append(f"# root\t{os.fspath(self.root)}")
        lines.append(f"# seed\t{self.seed}")
        lines.append("# classes\t" + "\t".join(self.classes))
        for split in SPLITS:
            for rel, label in self.splits.get(split, []):
                lines.append(f"{split}\t{label}\t{rel}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "SplitManifest":
        root, seed, classes = None, 0, []
        splits = {s: [] for s in SPLITS}
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        for n, line in enumerate(text.splitlines(), 1):
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("\t")
                if key == "root":
                    root = Path(value)
                elif key == "seed":
                    seed = int(value)
                elif key == "classes":
                    classes = value.split("\t")
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[0] not in splits:
                raise DataError(f"{path}:{n}: malformed manifest line {line!r}")
            splits[parts[0]].append((parts[2], int(parts[1])))
        if not classes:
            k = 1 + max((lab for items in splits.values() for _, lab in items), default=-1)
            classes = [str(i) for i in range(k)]
        return cls(seed=seed, classes=classes, splits=splits, root=root)


def scan_dataset(root) -> DatasetCatalog:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(classes) < 2:
        raise DataError(f"{root}: need at least 2 class folders, found {len(classes)}")
    files = {}
    for name in classes:
        kept = []
        for p in sorted((root / name).iterdir()):
            if not p.is_file():
                continue
            if p.suffix.lower() in IMAGE_EXTENSIONS:
                kept.append(f"{name}/{p.name}")
            else:
                log.warning("skipping non-image file %s", p)
        if not kept:
            raise DataError(f"class folder {root / name} has no images")
        files[name] = kept
    return DatasetCatalog(root, classes, files)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def stratified_split(catalog: DatasetCatalog, ratios=DEFAULT_RATIOS, seed: int = 0) -> SplitManifest:
    """Per class: seeded shuffle, then cut into train/val/test.

    Val and test take ``round(n * ratio)`` items each; train keeps the rest.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-6:
        raise ConfigError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    rng = Rng(seed)
    splits = {s: [] for s in SPLITS}
    for label, name in enumerate(catalog.classes):
        paths = list(catalog.files[name])
        n = len(paths)
        n_val = _round_half_up(n * ratios[1])
        n_test = _round_half_up(n * ratios[2])
        n_train = n - n_val - n_test
        if min(n_train, n_val, n_test) < 1:
            raise DataError(f"class {name!r} has {n} images, too few for a three-way split")
        order = rng.spawn(label).permutation(n)
        shuffled = [paths[i] for i in order]
        splits["train"] += [(p, label) for p in shuffled[:n_train]]
        splits["val"] += [(p, label) for p in shuffled[n_train:n_train + n_val]]
        splits["test"] += [(p, label) for p in shuffled[n_train + n_val:]]
    return SplitManifest(seed=seed, classes=list(catalog.classes), splits=splits, root=catalog.root)


# ---------------------------------------------------------------------------
# images


def resize_bilinear(arr: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize of the last two axes to ``side x side`` (half-pixel centres)."""
    *lead, H, W = arr.shape
    if H == side and W == side:
        return arr.copy()

    def axis_weights(n_in):
        pos = (np.arange(side) + 0.5) * (n_in / side) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, wy = axis_weights(H)
    x0, x1, wx = axis_weights(W)
    a = arr.astype(np.float64)
    rows = a[..., y0, :] * (1 - wy)[:, None] + a[..., y1, :] * wy[:, None]
    out = rows[..., x0] * (1 - wx) + rows[..., x1] * wx
    return out.astype(arr.dtype)


def load_image(path, side: int = 448) -> np.ndarray:
    """Decode to RGB, bilinear-resize to ``side x side`` and scale to [0, 1] -> ``[3, side, side]``."""
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (side, side):
                im = im.resize((side, side), Image.BILINEAR)
            pixels = np.asarray(im, dtype=np.float32)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return np.ascontiguousarray(pixels.transpose(2, 0, 1) / np.float32(255.0))


class ImageSet:
    """Labelled images addressed by index.

    Built either from arrays already in memory or from manifest items that
    are decoded on first access and then kept.
    """

    def __init__(self, labels, ids, images: np.ndarray | None = None, root=None, side: int = 448):
        self.labels = np.asarray(labels, dtype=np.int64)
        self.ids = list(ids)
        self.side = side if images is None else images.shape[-1]
        self.root = Path(root) if root is not None else None
        self._images = images
        self._cache = {}
        if len(self.ids) != len(self.labels):
            raise DataError("ids and labels differ in length")

    @classmethod
    def from_manifest(cls, manifest: SplitManifest, split: str, root=None, side: int = 448) -> "ImageSet":
        root = root if root is not None else manifest.root
        if root is None:
            raise DataError("manifest has no root; pass the dataset directory explicitly")
        items = manifest.splits.get(split, [])
        if not items:
            raise ConfigError(f"split {split!r} is empty")
        return cls([lab for _, lab in items], [rel for rel, _ in items], root=root, side=side)

    def __len__(self) -> int:
        return len(self.ids)

    def path(self, i: int) -> Path:
        return self.root / self.ids[i]

    def image(self, i: int) -> np.ndarray:
        if self._images is not None:
            return self._images[i]
        if i not in self._cache:
            self._cache[i] = load_image(self.path(i), self.side)
        return self._cache[i]

    def get(self, indices) -> np.ndarray:
        return np.stack([self.image(int(i)) for i in indices])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return Rng(seed).spawn(epoch).permutation(n)


def batches(dataset: ImageSet, batch_size: int, seed: int, epoch: int, shuffle: bool = True):
    """Yield ``(images, labels, ids)``; the order depends only on ``(seed, epoch)``."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n = len(dataset)
    order = epoch_order(n, seed, epoch) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.get(idx), dataset.labels[idx], [dataset.ids[i] for i in idx]
