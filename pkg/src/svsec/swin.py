"""Global-view branch: large-patch embedding and a single-stage Swin encoder.

Token grids are channel-last ``[B, Hg, Wg, C]``. Windows are enumerated
row-major over the grid and tokens row-major inside each window.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError
from .nn_layers import LayerNormParams, LinearLayer, init_params, linear
from .tensor_core import Rng, Tensor

MASK_VALUE = -1e9


@dataclass
class SwinConfig:
    patch_size: int = 48
    embed_dim: int = 96
    num_heads: int = 4
    window_size: int = 5
    shift: int | None = None  # None -> window_size // 2
    depth_pairs: int = 1
    mlp_ratio: int = 4
    input_side: int = 480
    out_dim: int = 64

    def __post_init__(self):
        if self.shift is None:
            self.shift = self.window_size // 2

    @property
    def grid_side(self) -> int:
        return self.input_side // self.patch_size

    def validate(self) -> "SwinConfig":
        if self.input_side % self.patch_size:
            raise ConfigError(f"input side {self.input_side} not divisible by patch {self.patch_size}")
        if self.grid_side % self.window_size:
            raise ConfigError(f"grid side {self.grid_side} not divisible by window {self.window_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed dim {self.embed_dim} not divisible by {self.num_heads} heads")
        if not 0 <= self.shift < self.window_size:
            raise ConfigError(f"shift {self.shift} must lie in [0, {self.window_size})")
        if self.depth_pairs < 1 or self.mlp_ratio < 1 or self.out_dim < 1:
            raise ConfigError("depth_pairs, mlp_ratio and out_dim must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# token-grid plumbing


def patch_embed(image: Tensor, cfg: SwinConfig, proj: LinearLayer) -> Tensor:
    """Split ``[B,3,S,S]`` into non-overlapping patches and project each to ``C``."""
    B, ch, S, S2 = image.shape
    P = cfg.patch_size
    if S != S2 or S % P:
        raise ConfigError(f"image side {S}x{S2} not divisible by patch size {P}")
    if S != cfg.input_side:
        raise ConfigError(f"image side {S} != configured input side {cfg.input_side}")
    g = S // P
    x = tc.reshape(image, (B, ch, g, P, g, P))
    x = tc.transpose(x, (0, 2, 4, 1, 3, 5))  # B, gy, gx, ch, py, px
    x = tc.reshape(x, (B, g, g, ch * P * P))
    return linear(x, proj)


def window_partition(grid: Tensor, w: int) -> Tensor:
    """``[B,Hg,Wg,C] -> [B*nW, w*w, C]``."""
    B, H, W, C = grid.shape
    if H % w or W % w:
        raise ConfigError(f"grid {H}x{W} not divisible by window {w}")
    x = tc.reshape(grid, (B, H // w, w, W // w, w, C))
    x = tc.transpose(x, (0, 1, 3, 2, 4, 5))
    return tc.reshape(x, (B * (H // w) * (W // w), w * w, C))


def window_reverse(windows: Tensor, w: int, H: int, W: int) -> Tensor:
    """Inverse of :func:`window_partition`."""
    nw = (H // w) * (W // w)
    C = windows.shape[-1]
    B = windows.shape[0] // nw
    x = tc.reshape(windows, (B, H // w, W // w, w, w, C))
    x = tc.transpose(x, (0, 1, 3, 2, 4, 5))
    return tc.reshape(x, (B, H, W, C))


def cyclic_shift(grid: Tensor, s: int) -> Tensor:
    """Move token ``(i, j)`` to ``((i+s) % Hg, (j+s) % Wg)``."""
    if s == 0:
        return grid
    return tc.roll(grid, (s, s), (1, 2))


def _band_labels(n: int, w: int, s: int) -> np.ndarray:
    labels = np.zeros(n, dtype=np.int64)
    labels[s:w] = 1
    labels[w:] = 2
    return labels


def shifted_window_mask(Hg: int, Wg: int, w: int, s: int) -> np.ndarray:
    """Additive attention mask ``[nW, w*w, w*w]`` for the shifted grid.

    After a shift by ``s`` each axis of the shifted grid splits into bands
    ``[0, s)`` (wrapped-around tokens), ``[s, w)`` and ``[w, n)``. Two tokens in
    one window may attend to each other only if they share both bands.
    """
    nw = (Hg // w) * (Wg // w)
    if s == 0:
        return np.zeros((nw, w * w, w * w))
    region = _band_labels(Hg, w, s)[:, None] * 3 + _band_labels(Wg, w, s)[None, :]
    win = region.reshape(Hg // w, w, Wg // w, w).transpose(0, 2, 1, 3).reshape(nw, w * w)
    same = win[:, :, None] == win[:, None, :]
    return np.where(same, 0.0, MASK_VALUE)


# ---------------------------------------------------------------------------
# encoder block


class SwinBlock:
    def __init__(self, cfg: SwinConfig, shifted: bool):
        C = cfg.embed_dim
        self.cfg = cfg
        self.shifted = shifted
        self.norm1 = LayerNormParams.create(C)
        self.qkv = LinearLayer.create(C, 3 * C)
        self.proj = LinearLayer.create(C, C)
        self.norm2 = LayerNormParams.create(C)
        self.fc1 = LinearLayer.create(C, cfg.mlp_ratio * C)
        self.fc2 = LinearLayer.create(cfg.mlp_ratio * C, C)
        self._mask = None

    def init(self, rng: Rng) -> None:
        for layer in (self.qkv, self.proj, self.fc1, self.fc2):
            init_params(layer, rng, "xavier")
        init_params(self.norm1, rng)
        init_params(self.norm2, rng)

    def parameters(self) -> dict:
        out = {}
        for name in ("norm1", "qkv", "proj", "norm2", "fc1", "fc2"):
            for k, v in getattr(self, name).parameters().items():
                out[f"{name}.{k}"] = v
        return out

    def mask(self, Hg: int, Wg: int) -> np.ndarray:
        if self._mask is None or self._mask[0] != (Hg, Wg):
            self._mask = ((Hg, Wg), shifted_window_mask(Hg, Wg, self.cfg.window_size, self.cfg.shift))
        return self._mask[1]

    def attention(self, windows: Tensor, mask: np.ndarray | None, batch: int) -> Tensor:
        """Multi-head self-attention inside each window: ``[N, L, C] -> [N, L, C]``."""
        N, L, C = windows.shape
        h = self.cfg.num_heads
        d = C // h
        qkv = tc.reshape(linear(windows, self.qkv), (N, L, 3, h, d))
        qkv = tc.transpose(qkv, (2, 0, 3, 1, 4))  # 3, N, h, L, d
        q = tc.scale(qkv[0], d ** -0.5)
        k, v = qkv[1], qkv[2]
        logits = tc.bmm(q, tc.transpose(k, (0, 1, 3, 2)))  # N, h, L, L
        if mask is not None:
            nw = mask.shape[0]
            logits = tc.reshape(logits, (batch, nw, h, L, L))
            logits = tc.add_constant(logits, mask[None, :, None])
            logits = tc.reshape(logits, (N, h, L, L))
        attn = tc.softmax(logits, axis=-1)
        out = tc.transpose(tc.bmm(attn, v), (0, 2, 1, 3))  # N, L, h, d
        return linear(tc.reshape(out, (N, L, C)), self.proj)

    def __call__(self, grid: Tensor, shifted: bool | None = None) -> Tensor:
        shifted = self.shifted if shifted is None else shifted
        B, H, W, C = grid.shape
        w, s = self.cfg.window_size, self.cfg.shift if shifted else 0
        x = tc.layer_norm(grid, self.norm1.gamma, self.norm1.beta)
        x = cyclic_shift(x, s)
        win = window_partition(x, w)
        win = self.attention(win, self.mask(H, W) if s else None, B)
        x = window_reverse(win, w, H, W)
        if s:
            x = tc.roll(x, (-s, -s), (1, 2))
        grid = tc.add(grid, x)
        y = tc.layer_norm(grid, self.norm2.gamma, self.norm2.beta)
        y = linear(tc.gelu(linear(y, self.fc1)), self.fc2)
        return tc.add(grid, y)


def swin_block_forward(grid: Tensor, block: SwinBlock, shifted: bool) -> Tensor:
    return block(grid, shifted)


# ---------------------------------------------------------------------------
# branch


class SwinBranch:
    """Patch embedding, ``depth_pairs`` x (W-MSA, SW-MSA) blocks, LN, token mean, linear."""

    def __init__(self, cfg: SwinConfig, rng: Rng | None = None):
        self.cfg = cfg.validate()
        C = cfg.embed_dim
        self.embed = LinearLayer.create(3 * cfg.patch_size ** 2, C)
        self.blocks = []
        for _ in range(cfg.depth_pairs):
            self.blocks.append(SwinBlock(cfg, shifted=False))
            self.blocks.append(SwinBlock(cfg, shifted=True))
        self.norm = LayerNormParams.create(C)
        self.head = LinearLayer.create(C, cfg.out_dim)
        if rng is not None:
            self.init(rng)

    def init(self, rng: Rng) -> None:
        init_params(self.embed, rng, "xavier")
        for blk in self.blocks:
            blk.init(rng)
        init_params(self.norm, rng)
        init_params(self.head, rng, "xavier")

    def parameters(self) -> dict:
        out = {f"embed.{k}": v for k, v in self.embed.parameters().items()}
        for i, blk in enumerate(self.blocks):
            out.update({f"blocks.{i}.{k}": v for k, v in blk.parameters().items()})
        out.update({f"norm.{k}": v for k, v in self.norm.parameters().items()})
        out.update({f"head.{k}": v for k, v in self.head.parameters().items()})
        return out

    def tokens(self, image: Tensor) -> Tensor:
        grid = patch_embed(image, self.cfg, self.embed)
        for blk in self.blocks:
            grid = blk(grid)
        return grid

    def __call__(self, image: Tensor) -> Tensor:
        grid = self.tokens(image)
        grid = tc.layer_norm(grid, self.norm.gamma, self.norm.beta)
        pooled = tc.mean(grid, axis=(1, 2))
        return linear(pooled, self.head)


def swin_branch_forward(image: Tensor, branch: SwinBranch) -> Tensor:
    return branch(image)
