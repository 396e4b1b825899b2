"""Local-view branch: a reduced VGG with the saliency map appended per level."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

from . import tensor_core as tc
from .errors import ConfigError
from .nn_layers import Conv2dLayer, LinearLayer, conv2d, global_avg_pool, init_params, linear, maxpool2d
from .tensor_core import Rng, ShapeError, Tensor


@dataclass
class CnnConfig:
    input_side: int = 448
    stage_filters: list = field(default_factory=lambda: [32, 64, 128, 256])
    fuse_input_channel: bool = True
    fuse_per_stage: bool = True
    head_dims: list = field(default_factory=lambda: [128, 64])  # dense widths after GAP

    # fixed by the architecture
    convs_per_stage = 2
    kernel = 3

    def validate(self) -> "CnnConfig":
        if not self.stage_filters or any(f < 1 for f in self.stage_filters):
            raise ConfigError(f"stage_filters must be non-empty and positive: {self.stage_filters}")
        if self.input_side % (2 ** len(self.stage_filters)):
            raise ConfigError(f"input side {self.input_side} does not halve cleanly "
                              f"{len(self.stage_filters)} times")
        if len(self.head_dims) < 1 or any(d < 1 for d in self.head_dims):
            raise ConfigError(f"head_dims must be non-empty and positive: {self.head_dims}")
        return self

    @property
    def uses_saliency(self) -> bool:
        return self.fuse_input_channel or self.fuse_per_stage

    @property
    def map_side(self) -> int:
        """Native saliency resolution: half the image side."""
        return self.input_side // 2

    @property
    def feature_width(self) -> int:
        return self.stage_filters[-1]

    @property
    def out_dim(self) -> int:
        return self.head_dims[-1]

    def stage_in_channels(self) -> list:
        chans = [3 + int(self.fuse_input_channel)]
        for f in self.stage_filters[:-1]:
            chans.append(f + int(self.fuse_per_stage))
        return chans

    def to_dict(self) -> dict:
        return asdict(self)


def vgg_stage_forward(x: Tensor, conv_a: Conv2dLayer, conv_b: Conv2dLayer) -> Tensor:
    """conv3x3 -> ReLU -> conv3x3 -> ReLU -> 2x2 max-pool."""
    x = tc.relu(conv2d(x, conv_a))
    x = tc.relu(conv2d(x, conv_b))
    return maxpool2d(x, 2, 2)


def fuse_saliency(x: Tensor, smap: Tensor) -> Tensor:
    """Append a single-channel map after the feature channels."""
    B, C, H, W = x.shape
    if smap.ndim != 4 or smap.shape[1] != 1 or smap.shape[2:] != (H, W):
        raise ShapeError(f"saliency map {smap.shape} does not match features {x.shape}")
    if smap.shape[0] != B:
        raise ShapeError(f"saliency batch {smap.shape[0]} != feature batch {B}")
    return tc.concat([x, smap], axis=1)


class CnnBranch:
    def __init__(self, cfg: CnnConfig, rng: Rng | None = None):
        self.cfg = cfg.validate()
        self.stages = []
        for cin, f in zip(cfg.stage_in_channels(), cfg.stage_filters):
            self.stages.append((Conv2dLayer.create(cin, f, 3, 1, 1), Conv2dLayer.create(f, f, 3, 1, 1)))
        widths = [cfg.feature_width] + list(cfg.head_dims)
        self.dense = [LinearLayer.create(a, b) for a, b in zip(widths[:-1], widths[1:])]
        if rng is not None:
            self.init(rng)

    def init(self, rng: Rng) -> None:
        for conv_a, conv_b in self.stages:
            init_params(conv_a, rng, "he")
            init_params(conv_b, rng, "he")
        for layer in self.dense:
            init_params(layer, rng, "he")

    def parameters(self) -> dict:
        out = {}
        for i, (conv_a, conv_b) in enumerate(self.stages):
            for j, conv in enumerate((conv_a, conv_b)):
                out.update({f"stages.{i}.conv{j}.{k}": v for k, v in conv.parameters().items()})
        for i, layer in enumerate(self.dense):
            out.update({f"dense.{i}.{k}": v for k, v in layer.parameters().items()})
        return out

    def features(self, image: Tensor, maps: dict | None = None, trace: list | None = None) -> Tensor:
        """Stage stack plus GAP -> ``[B, stage_filters[-1]]``.

        ``maps`` maps side -> ``[B,1,side,side]`` saliency tensors (see
        :func:`svsec.saliency.map_pyramid`). ``trace`` collects the channel
        count entering each stage.
        """
        cfg = self.cfg
        if image.ndim != 4 or image.shape[2] != cfg.input_side or image.shape[3] != cfg.input_side:
            raise ShapeError(f"CNN branch expects [B,3,{cfg.input_side},{cfg.input_side}], got {image.shape}")
        if cfg.uses_saliency and maps is None:
            raise ShapeError("saliency fusion is enabled but no maps were given")
        x = image
        if cfg.fuse_input_channel:
            x = fuse_saliency(x, maps[cfg.input_side])
        last = len(self.stages) - 1
        for i, (conv_a, conv_b) in enumerate(self.stages):
            if trace is not None:
                trace.append(x.shape[1])
            x = vgg_stage_forward(x, conv_a, conv_b)
            if cfg.fuse_per_stage and i < last:
                x = fuse_saliency(x, maps[x.shape[2]])
        return global_avg_pool(x)

    def __call__(self, image: Tensor, maps: dict | None = None) -> Tensor:
        x = self.features(image, maps)
        for layer in self.dense:
            x = tc.relu(linear(x, layer))
        return x


def cnn_branch_forward(image: Tensor, maps: dict | None, branch: CnnBranch) -> Tensor:
    return branch(image, maps)
