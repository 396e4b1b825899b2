"""Vanilla-gradient saliency maps and their resampling to stage resolutions."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError
from .tensor_core import ShapeError, Tape, Tensor


class Scorer(Protocol):
    """Any classifier mapping ``[B,3,s,s]`` images to ``[B,K]`` logits."""

    input_side: int

    def __call__(self, image: Tensor) -> Tensor: ...


@dataclass
class SaliencyMap:
    values: np.ndarray  # [1, 1, S, S], float32 in [0, 1]
    source_id: str = ""

    @property
    def side(self) -> int:
        return self.values.shape[-1]


class ScaledScorer:
    """Wrap a scorer and multiply its logits by a constant."""

    def __init__(self, scorer: Scorer, factor: float):
        self.scorer = scorer
        self.factor = factor
        self.input_side = scorer.input_side

    def __call__(self, image: Tensor) -> Tensor:
        return tc.scale(self.scorer(image), self.factor)


def area_downsample(arr: np.ndarray, factor: int) -> np.ndarray:
    """Mean over non-overlapping ``factor x factor`` blocks of the last two axes."""
    if factor == 1:
        return arr
    *lead, H, W = arr.shape
    if H % factor or W % factor:
        raise ConfigError(f"{H}x{W} is not divisible by {factor}")
    blocks = arr.reshape(*lead, H // factor, factor, W // factor, factor)
    return blocks.mean(axis=(-3, -1), dtype=np.float64).astype(arr.dtype)


def resize_map(values: np.ndarray, side: int) -> np.ndarray:
    """Resample ``[..., S, S]`` to ``side`` by area averaging (down) or pixel repetition (up).

    The ratio between ``S`` and ``side`` must be a power of two.
    """
    if isinstance(values, SaliencyMap):
        values = values.values
    S = values.shape[-1]
    if side == S:
        return values.copy()
    big, small = max(S, side), min(S, side)
    ratio = big // small
    if big % small or ratio & (ratio - 1):
        raise ConfigError(f"cannot resize a {S}-pixel map to {side}: ratio is not a power of two")
    if side < S:
        return area_downsample(values, ratio)
    return np.repeat(np.repeat(values, ratio, axis=-2), ratio, axis=-1)


def gradient_saliency(x: np.ndarray, scorer) -> np.ndarray:
    """Normalised input-gradient map of the top-class logit, ``[B,C,H,W] -> [B,1,H,W]``.

    The argmax logit is picked per image (lowest index on ties), backpropagated
    to ``x``, reduced by max-|.| over channels and min-max normalised per
    image. A constant gradient yields all zeros.
    """
    inp = Tensor(np.array(x, dtype=np.float32), requires_grad=True)
    with Tape() as tape:
        logits = scorer(inp)
        top = np.argmax(logits.data, axis=1)
        picked = tc.tsum(tc.getitem(logits, (np.arange(len(top)), top)))
    tc.backward(picked, tape, wrt=[inp])
    grad = np.abs(inp.grad.astype(np.float64)).max(axis=1, keepdims=True)
    lo = grad.min(axis=(1, 2, 3), keepdims=True)
    span = grad.max(axis=(1, 2, 3), keepdims=True) - lo
    out = np.divide(grad - lo, span, out=np.zeros_like(grad), where=span > 0)
    return out.astype(np.float32)


def compute_saliency(image: Tensor | np.ndarray, scorer: Scorer, source_id: str = "") -> SaliencyMap | list:
    """Saliency map of a full-resolution image at half its side.

    The image is 2x area-downsampled to the scorer's input side, then
    explained with :func:`gradient_saliency`. A batch of more than one image
    returns a list of maps.
    """
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 4 or arr.shape[1] != 3 or arr.shape[2] != arr.shape[3]:
        raise ShapeError(f"expected [B,3,S,S] image, got {arr.shape}")
    if arr.shape[2] != 2 * scorer.input_side:
        raise ShapeError(f"image side {arr.shape[2]} does not downsample to scorer side {scorer.input_side}")
    values = gradient_saliency(area_downsample(np.asarray(arr, dtype=np.float32), 2), scorer)
    maps = [SaliencyMap(values[b:b + 1], source_id) for b in range(values.shape[0])]
    return maps[0] if len(maps) == 1 else maps


def map_pyramid(values: np.ndarray, sides) -> dict:
    """Build ``{side: Tensor[B,1,side,side]}`` from a batch of native-resolution maps."""
    return {side: Tensor(resize_map(values, side).astype(np.float32)) for side in sides}


def to_png_bytes(smap: SaliencyMap) -> bytes:
    """Encode a map as 8-bit grayscale PNG with value ``round(255 * v)``."""
    import io

    from PIL import Image

    pixels = np.round(255.0 * np.asarray(smap.values, dtype=np.float64)[0, 0]).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(pixels, mode="L").save(buf, format="PNG")
    return buf.getvalue()
