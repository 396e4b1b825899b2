"""Learnable layers and spatial ops shared by both branches.

Images are NCHW. Convolution is cross-correlation (no kernel flip).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import (
    Rng,
    ShapeError,
    Tensor,
    _f64,
    _make,
    bias_add,
    get_dtype,
    matmul,
    reshape,
    transpose,
)

__all__ = [
    "Conv2dLayer",
    "LinearLayer",
    "LayerNormParams",
    "conv2d",
    "maxpool2d",
    "linear",
    "global_avg_pool",
    "init_params",
]


@dataclass
class Conv2dLayer:
    weight: Tensor  # [outC, inC, kH, kW]
    bias: Tensor  # [outC]
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"conv weight {self.weight.shape} / bias {self.bias.shape} mismatch")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("conv stride must be >= 1 and padding >= 0")

    @classmethod
    def create(cls, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1, padding: int = 1):
        w = Tensor(np.zeros((out_ch, in_ch, kernel, kernel), dtype=get_dtype()), requires_grad=True)
        b = Tensor(np.zeros(out_ch, dtype=get_dtype()), requires_grad=True)
        return cls(w, b, stride, padding)

    def parameters(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self)


@dataclass
class LinearLayer:
    weight: Tensor  # [out, in]
    bias: Tensor  # [out]

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"linear weight {self.weight.shape} / bias {self.bias.shape} mismatch")

    @classmethod
    def create(cls, in_features: int, out_features: int):
        w = Tensor(np.zeros((out_features, in_features), dtype=get_dtype()), requires_grad=True)
        b = Tensor(np.zeros(out_features, dtype=get_dtype()), requires_grad=True)
        return cls(w, b)

    def parameters(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self)


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def create(cls, channels: int):
        return cls(Tensor(np.ones(channels, dtype=get_dtype()), requires_grad=True),
                   Tensor(np.zeros(channels, dtype=get_dtype()), requires_grad=True))

    def parameters(self) -> dict:
        return {"gamma": self.gamma, "beta": self.beta}


def _out_extent(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(f"conv output extent ({n}+2*{pad}-{k})/{stride}+1 is not integral")
    return span // stride + 1


def conv2d(x: Tensor, layer: Conv2dLayer) -> Tensor:
    """2-d cross-correlation plus bias.

    Accumulates one kernel tap at a time (``kH*kW`` channel contractions), which
    keeps memory at the size of the output instead of an im2col buffer.
    """
    w_t = layer.weight
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got {x.shape}")
    B, C, H, W = x.shape
    F, Cin, kh, kw = w_t.shape
    if C != Cin:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Cin}")
    s, p = layer.stride, layer.padding
    Ho, Wo = _out_extent(H, kh, s, p), _out_extent(W, kw, s, p)

    xp = np.pad(_f64(x), ((0, 0), (0, 0), (p, p), (p, p)))
    wv = _f64(w_t)
    out = np.zeros((F, B, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s]
            out += np.tensordot(wv[:, :, i, j], patch, axes=([1], [1]))
    out = out.transpose(1, 0, 2, 3) + _f64(layer.bias).reshape(1, F, 1, 1)

    def back(g):
        g_f = g.transpose(1, 0, 2, 3)  # [F, B, Ho, Wo]
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(wv)
        for i in range(kh):
            for j in range(kw):
                rows = slice(i, i + s * (Ho - 1) + 1, s)
                cols = slice(j, j + s * (Wo - 1) + 1, s)
                patch = xp[:, :, rows, cols]
                dw[:, :, i, j] = np.tensordot(g_f, patch, axes=([1, 2, 3], [0, 2, 3]))
                dxp[:, :, rows, cols] += np.tensordot(wv[:, :, i, j], g_f, axes=([0], [0])).transpose(1, 0, 2, 3)
        dx = dxp[:, :, p:p + H, p:p + W]
        return dx, dw, g.sum(axis=(0, 2, 3))

    return _make(out, (x, w_t, layer.bias), back)


def maxpool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling.

    Odd spatial extents are zero-padded on the right/bottom first. Gradients go
    to the first maximum in row-major window order.
    """
    if k != stride:
        raise ShapeError("maxpool2d supports only non-overlapping windows (k == stride)")
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW input, got {x.shape}")
    B, C, H, W = x.shape
    ph, pw = (-H) % k, (-W) % k
    xv = np.pad(_f64(x), ((0, 0), (0, 0), (0, ph), (0, pw)))
    Ho, Wo = xv.shape[2] // k, xv.shape[3] // k
    win = xv.reshape(B, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        dwin = np.zeros((B, C, Ho, Wo, k * k))
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(B, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * k, Wo * k)
        return (dx[:, :, :H, :W],)

    return _make(out, (x,), back)


def linear(x: Tensor, layer: LinearLayer) -> Tensor:
    """``x @ W.T + b`` over the last axis; leading axes are flattened and restored."""
    out_f, in_f = layer.weight.shape
    if x.shape[-1] != in_f:
        raise ShapeError(f"linear: input width {x.shape[-1]} != layer in_features {in_f}")
    lead = x.shape[:-1]
    flat = x if x.ndim == 2 else reshape(x, (-1, in_f))
    y = bias_add(matmul(flat, transpose(layer.weight, (1, 0))), layer.bias)
    return y if x.ndim == 2 else reshape(y, lead + (out_f,))


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes of an NCHW tensor -> [B, C]."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW input, got {x.shape}")
    B, C, H, W = x.shape
    n = H * W
    return _make(_f64(x).mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / n, (B, C, H, W)),))


def init_params(layer, rng: Rng, scheme: str = "he", gain: float = 1.0):
    """Initialise ``layer`` in place and return it.

    ``"he"``: normal with std ``sqrt(2/fan_in)`` (layers feeding a ReLU).
    ``"xavier"``: uniform on ``+-gain*sqrt(6/(fan_in+fan_out))``.
    ``"zeros"``: all weights zero. Biases are always zeroed; layer-norm gets
    gamma=1, beta=0.
    """
    if isinstance(layer, LayerNormParams):
        layer.gamma.data[...] = 1.0
        layer.beta.data[...] = 0.0
        return layer
    w = layer.weight.data
    if w.ndim == 4:
        fan_in = w.shape[1] * w.shape[2] * w.shape[3]
        fan_out = w.shape[0] * w.shape[2] * w.shape[3]
    else:
        fan_out, fan_in = w.shape
    if scheme == "he":
        w[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), w.shape)
    elif scheme == "xavier":
        bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-bound, bound, w.shape)
    elif scheme == "zeros":
        w[...] = 0.0
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    layer.bias.data[...] = 0.0
    return layer
