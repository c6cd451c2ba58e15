"""Small convolutional backbone with output stride 32 or 16.

Topology: a stem (two stride-2 convs and a stride-2 max pool, 1/8 of the
input), then three stages of convolutions separated by two stride-2 grid
reduction convs. Converting to output stride 16 sets the last reduction's
stride to 1 and dilates every convolution after it by 2. All convolutions use
"same" padding, so the feature map is ``ceil(input / output_stride)``.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .layers import Conv2d, MaxPool2d, Param, ReLU, Tape
from .tensor import DimensionError

__all__ = [
    "BackboneConfig",
    "Backbone",
    "build_backbone",
    "convert_to_os16",
    "ConfigError",
    "backbone_config_dict",
    "backbone_config_from_dict",
]


class ConfigError(ValueError):
    """An architecture or run configuration is invalid."""


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: tuple[int, int] = (16, 32)
    block_channels: tuple[int, int, int] = (32, 48, 64)
    convs_per_stage: int = 2
    kernel: int = 3
    stem_kernel: int = 3
    output_stride: int = 32
    input_channels: int = 3

    def validate(self) -> None:
        if self.output_stride not in (16, 32):
            raise ConfigError(f"output_stride must be 16 or 32, got {self.output_stride}")
        if len(self.stem_channels) != 2:
            raise ConfigError("stem needs exactly two conv widths")
        if len(self.block_channels) != 3:
            raise ConfigError("backbone needs exactly three stages (two grid reductions)")
        if self.convs_per_stage < 1:
            raise ConfigError("each stage needs at least one convolution")
        widths = (*self.stem_channels, *self.block_channels, self.input_channels)
        if min(widths) < 1:
            raise ConfigError("channel counts must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0 or self.stem_kernel < 1 or self.stem_kernel % 2 == 0:
            raise ConfigError("kernel sizes must be odd and positive")

    @property
    def feature_channels(self) -> int:
        return self.block_channels[-1]


def backbone_config_dict(cfg: BackboneConfig) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}


def backbone_config_from_dict(d: dict) -> BackboneConfig:
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    cfg = BackboneConfig(**d)
    cfg.validate()
    return cfg


@dataclass
class Backbone:
    config: BackboneConfig
    layers: list = field(default_factory=list)

    @property
    def feature_channels(self) -> int:
        return self.config.feature_channels

    @property
    def output_stride(self) -> int:
        return self.config.output_stride

    def convs(self) -> list[Conv2d]:
        return [layer for layer in self.layers if isinstance(layer, Conv2d)]

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def named_params(self) -> dict[str, Param]:
        return {p.name: p for p in self.params()}

    def feature_size(self, h: int, w: int) -> tuple[int, int]:
        for layer in self.layers:
            if hasattr(layer, "output_size"):
                h, w = layer.output_size(h, w)
        return h, w

    def forward(self, images: np.ndarray, tape: Tape | None = None) -> np.ndarray:
        """Activations N x C_feat x ceil(H/os) x ceil(W/os); no pooling head."""
        if images.ndim != 4 or images.shape[1] != self.config.input_channels:
            raise DimensionError(
                f"expected N x {self.config.input_channels} x H x W images, got {images.shape}"
            )
        h, w = images.shape[2:]
        if h < 1 or w < 1 or min(self.feature_size(h, w)) < 1:
            raise DimensionError(f"input {h}x{w} too small for this backbone")
        x = images
        for layer in self.layers:
            x = layer(x, tape)
        return x

    __call__ = forward


def _relu_after(name: str) -> ReLU:
    return ReLU(f"{name}.relu")


def build_backbone(cfg: BackboneConfig, seed=0) -> Backbone:
    """Build a backbone with fan-in-scaled uniform weights drawn from ``seed``.

    ``seed`` may be an int or a ``numpy.random.Generator``. An output-stride-16
    config is built as the stride-32 network followed by :func:`convert_to_os16`,
    so both share the same parameters for the same seed.
    """
    cfg.validate()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    base = replace(cfg, output_stride=32)
    layers: list = []

    def conv(name, cin, cout, kernel, stride=1):
        layers.append(Conv2d(name, cin, cout, kernel=kernel, stride=stride, rng=rng))
        layers.append(_relu_after(name))

    s1, s2 = cfg.stem_channels
    conv("stem.conv1", cfg.input_channels, s1, cfg.stem_kernel, stride=2)
    layers[0].input_grad = False  # images are data
    conv("stem.conv2", s1, s2, cfg.stem_kernel, stride=2)
    layers.append(MaxPool2d("stem.pool", kernel=3, stride=2))
    cin = s2
    for stage, width in enumerate(cfg.block_channels, start=1):
        if stage > 1:
            conv(f"reduce{stage - 1}", cin, width, cfg.kernel, stride=2)
            cin = width
        for i in range(1, cfg.convs_per_stage + 1):
            conv(f"stage{stage}.conv{i}", cin, width, cfg.kernel)
            cin = width
    net = Backbone(base, layers)
    if cfg.output_stride == 16:
        net = convert_to_os16(net)
    return net


def convert_to_os16(net: Backbone) -> Backbone:
    """Copy of ``net`` with the last reduction at stride 1 and later convs dilated by 2.

    Parameter values are copied bit-for-bit; only strides and dilations change.
    """
    if net.config.output_stride != 32:
        raise ConfigError("backbone is already at output stride 16")
    layers = copy.deepcopy(net.layers)
    convs = [layer for layer in layers if isinstance(layer, Conv2d)]
    last_reduce = max(i for i, c in enumerate(convs) if c.name.startswith("reduce"))
    convs[last_reduce].stride = 1
    for c in convs[last_reduce + 1:]:
        c.dilation = 2
    return Backbone(replace(net.config, output_stride=16), layers)
