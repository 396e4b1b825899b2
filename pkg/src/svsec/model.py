"""Two-branch classifier assembly, losses, optimisers and checkpoint I/O."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor_core as tc
from .cnn import CnnBranch, CnnConfig
from .data import resize_bilinear
from .errors import BadMagicError, CheckpointError, ConfigError, DataError, TruncatedCheckpointError, VersionMismatchError
from .nn_layers import LinearLayer, init_params, linear
from .saliency import map_pyramid
from .swin import SwinBranch, SwinConfig
from .tensor_core import Rng, Tensor

VARIANTS = ("svsec", "cnn", "swin")
LOSSES = ("softmax", "sigmoid")


@dataclass
class ModelConfig:
    swin: SwinConfig = field(default_factory=SwinConfig)
    cnn: CnnConfig = field(default_factory=CnnConfig)
    num_classes: int = 8
    head_hidden: int = 64
    variant: str = "svsec"
    loss: str = "softmax"
    seed: int = 0

    @property
    def uses_swin(self) -> bool:
        return self.variant in ("svsec", "swin")

    @property
    def uses_cnn(self) -> bool:
        return self.variant in ("svsec", "cnn")

    @property
    def uses_saliency(self) -> bool:
        return self.uses_cnn and self.cnn.uses_saliency

    @property
    def image_side(self) -> int:
        return self.cnn.input_side

    @property
    def head_input(self) -> int:
        return self.swin.out_dim * self.uses_swin + self.cnn.out_dim * self.uses_cnn

    def validate(self) -> "ModelConfig":
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.head_hidden < 1:
            raise ConfigError("head_hidden must be >= 1")
        if self.uses_swin:
            self.swin.validate()
        if self.uses_cnn:
            self.cnn.validate()
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        swin = SwinConfig(**d.pop("swin", {}))
        cnn = CnnConfig(**d.pop("cnn", {}))
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(swin=swin, cnn=cnn, **d)


def reduced_config(num_classes: int = 4, side: int = 96, seed: int = 0, **overrides) -> ModelConfig:
    """Desk-scale configuration used by the tests and the synthetic runs."""
    cfg = ModelConfig(
        swin=SwinConfig(patch_size=48, embed_dim=8, num_heads=2, window_size=2, shift=1,
                        input_side=side, out_dim=8),
        cnn=CnnConfig(input_side=side, stage_filters=[4, 8], head_dims=[4, 4]),
        num_classes=num_classes,
        head_hidden=8,
        seed=seed,
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


class SVSECModel:
    """Swin branch and/or saliency-fused CNN branch, concatenated (swin first) into an MLP head.

    Also satisfies the saliency ``Scorer`` protocol when the CNN branch runs
    without fusion: ``input_side`` is the image side and ``__call__`` takes
    only images.
    """

    def __init__(self, cfg: ModelConfig, init: bool = True):
        self.cfg = cfg.validate()
        rng = Rng(cfg.seed) if init else None
        self.swin = SwinBranch(cfg.swin, rng.spawn(1) if rng else None) if cfg.uses_swin else None
        self.cnn = CnnBranch(cfg.cnn, rng.spawn(2) if rng else None) if cfg.uses_cnn else None
        self.head = [LinearLayer.create(cfg.head_input, cfg.head_hidden),
                     LinearLayer.create(cfg.head_hidden, cfg.num_classes)]
        if rng is not None:
            hrng = rng.spawn(3)
            init_params(self.head[0], hrng, "he")
            # small output weights keep the initial predictions close to uniform
            init_params(self.head[1], hrng, "xavier", gain=0.1)

    @property
    def input_side(self) -> int:
        return self.cfg.image_side

    def parameters(self) -> dict:
        out = {}
        if self.swin is not None:
            out.update({f"swin.{k}": v for k, v in self.swin.parameters().items()})
        if self.cnn is not None:
            out.update({f"cnn.{k}": v for k, v in self.cnn.parameters().items()})
        for i, layer in enumerate(self.head):
            out.update({f"head.{i}.{k}": v for k, v in layer.parameters().items()})
        return out

    def map_sides(self) -> list:
        c = self.cfg.cnn
        sides = [c.input_side] if c.fuse_input_channel else []
        if c.fuse_per_stage:
            sides += [c.input_side >> (i + 1) for i in range(len(c.stage_filters) - 1)]
        return sides

    def features(self, images, maps=None) -> Tensor:
        """Concatenated branch features ``[B, head_input]``."""
        cfg = self.cfg
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=tc.get_dtype()))
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != cfg.image_side:
            raise tc.ShapeError(f"expected [B,3,{cfg.image_side},{cfg.image_side}] images, got {x.shape}")
        parts = []
        if self.swin is not None:
            sx = x
            if cfg.swin.input_side != cfg.image_side:
                sx = Tensor(resize_bilinear(x.data, cfg.swin.input_side))
            parts.append(self.swin(sx))
        if self.cnn is not None:
            pyramid = None
            if cfg.cnn.uses_saliency:
                if maps is None:
                    raise tc.ShapeError("this configuration fuses saliency maps; none were given")
                m = maps.data if isinstance(maps, Tensor) else np.asarray(maps, dtype=np.float32)
                if m.shape != (x.shape[0], 1, cfg.cnn.map_side, cfg.cnn.map_side):
                    raise tc.ShapeError(f"maps must be [B,1,{cfg.cnn.map_side},{cfg.cnn.map_side}], got {m.shape}")
                pyramid = map_pyramid(m, self.map_sides())
            parts.append(self.cnn(x, pyramid))
        return parts[0] if len(parts) == 1 else tc.concat(parts, axis=1)

    def forward(self, images, maps=None) -> Tensor:
        h = tc.relu(linear(self.features(images, maps), self.head[0]))
        return linear(h, self.head[1])

    def __call__(self, images, maps=None) -> Tensor:
        return self.forward(images, maps)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
        return h.hexdigest()[:16]


def svsec_forward(images, maps, model: SVSECModel) -> Tensor:
    return model.forward(images, maps)


def scorer_config(cfg: ModelConfig) -> ModelConfig:
    """Plain CNN classifier at half the image side, used as the default saliency scorer."""
    cnn = CnnConfig(input_side=cfg.cnn.map_side, stage_filters=list(cfg.cnn.stage_filters),
                    fuse_input_channel=False, fuse_per_stage=False, head_dims=list(cfg.cnn.head_dims))
    return ModelConfig(swin=SwinConfig(**asdict(cfg.swin)), cnn=cnn, num_classes=cfg.num_classes,
                       head_hidden=cfg.head_hidden, variant="cnn", seed=cfg.seed + 7919)


# ---------------------------------------------------------------------------
# losses


def _check_labels(labels, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 1:
        raise DataError(f"labels must be 1-d, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    return labels


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    B, K = logits.shape
    labels = _check_labels(labels, K)
    if len(labels) != B:
        raise DataError(f"{len(labels)} labels for a batch of {B}")
    z = logits.data.astype(np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(B), labels].mean()
    onehot = np.eye(K)[labels]
    return tc._make(np.asarray(loss), (logits,), lambda g: (g * (np.exp(logp) - onehot) / B,))


def sigmoid_bce(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of per-class sigmoids against one-hot targets."""
    B, K = logits.shape
    labels = _check_labels(labels, K)
    y = np.eye(K)[labels]
    z = logits.data.astype(np.float64)
    loss = (np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))).mean()
    p = 1.0 / (1.0 + np.exp(-z))
    return tc._make(np.asarray(loss), (logits,), lambda g: (g * (p - y) / (B * K),))


def loss_fn(cfg: ModelConfig):
    return cross_entropy if cfg.loss == "softmax" else sigmoid_bce


def probabilities(logits: Tensor, loss: str = "softmax") -> np.ndarray:
    z = logits.data.astype(np.float64)
    if loss == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-z))
        return s / s.sum(axis=1, keepdims=True)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# optimisers


class SGD:
    kind = "sgd"

    def __init__(self, lr: float = 1e-2):
        self.lr = lr
        self.t = 0

    def step(self, params: dict) -> None:
        self.t += 1
        for p in params.values():
            if p.grad is not None:
                p.data[...] = (p.data.astype(np.float64) - self.lr * p.grad.astype(np.float64)).astype(p.data.dtype)

    def hyper(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "t": self.t}

    def state_tensors(self) -> dict:
        return {}

    def load_state(self, hyper: dict, tensors: dict) -> None:
        self.t = int(hyper.get("t", 0))


class Adam:
    kind = "adam"

    def __init__(self, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m = self.m.get(name, np.zeros_like(g)) * b1 + (1 - b1) * g
            v = self.v.get(name, np.zeros_like(g)) * b2 + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data[...] = (p.data.astype(np.float64) - update).astype(p.data.dtype)

    def hyper(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "t": self.t}

    def state_tensors(self) -> dict:
        out = {f"adam.m/{k}": v for k, v in self.m.items()}
        out.update({f"adam.v/{k}": v for k, v in self.v.items()})
        return out

    def load_state(self, hyper: dict, tensors: dict) -> None:
        self.t = int(hyper.get("t", 0))
        self.m = {k[len("adam.m/"):]: v.astype(np.float64) for k, v in tensors.items() if k.startswith("adam.m/")}
        self.v = {k[len("adam.v/"):]: v.astype(np.float64) for k, v in tensors.items() if k.startswith("adam.v/")}


def make_optimizer(kind: str = "adam", lr: float = 1e-4, **kw):
    if kind == "adam":
        return Adam(lr, **kw)
    if kind == "sgd":
        return SGD(lr)
    raise ConfigError(f"unknown optimizer {kind!r}")


def optimizer_step(params: dict, optimizer) -> None:
    optimizer.step(params)


# ---------------------------------------------------------------------------
# checkpoints
#
# b"SVSE" | u32 version | u32 json length | json | records...
# record: u32 name length | name | u32 rank | u64 extents * rank | f32 LE payload

MAGIC = b"SVSE"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    model: SVSECModel
    epoch: int = 0
    rng_state: dict | None = None
    optimizer_hyper: dict | None = None
    optimizer_tensors: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def optimizer(self):
        if not self.optimizer_hyper:
            return None
        h = dict(self.optimizer_hyper)
        kind = h.pop("kind")
        opt = make_optimizer(kind, h.pop("lr"), **{k: v for k, v in h.items() if k != "t"})
        opt.load_state(self.optimizer_hyper, self.optimizer_tensors)
        return opt


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def save_checkpoint(path, model: SVSECModel, optimizer=None, epoch: int = 0,
                    rng_state: dict | None = None, extra: dict | None = None) -> None:
    tensors = {f"param/{k}": v.data for k, v in model.parameters().items()}
    if optimizer is not None:
        tensors.update({f"opt/{k}": v for k, v in optimizer.state_tensors().items()})
    meta = {
        "config": model.cfg.to_dict(),
        "epoch": epoch,
        "rng_state": rng_state,
        "optimizer": optimizer.hyper() if optimizer is not None else None,
        "num_tensors": len(tensors),
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True, default=int).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob]
    parts += [_pack_tensor(k, v) for k, v in tensors.items()]
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: not an SVSE checkpoint (magic {buf[:4]!r})")
    r = _Reader(buf)
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config block: {exc}") from exc
    tensors = {}
    for _ in range(int(meta["num_tensors"])):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank))
        count = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes after the last tensor")

    cfg = ModelConfig.from_dict(meta["config"])
    model = SVSECModel(cfg, init=False)
    params = model.parameters()
    missing = [k for k in params if f"param/{k}" not in tensors]
    if missing:
        raise CheckpointError(f"{path}: missing parameters {missing[:3]}...")
    for k, p in params.items():
        arr = tensors[f"param/{k}"]
        if arr.shape != p.shape:
            raise CheckpointError(f"{path}: parameter {k} has shape {arr.shape}, expected {p.shape}")
        p.data = arr.copy()
    opt_tensors = {k[len("opt/"):]: v for k, v in tensors.items() if k.startswith("opt/")}
    return Checkpoint(cfg, model, int(meta.get("epoch", 0)), meta.get("rng_state"),
                      meta.get("optimizer"), opt_tensors, meta.get("extra", {}))
