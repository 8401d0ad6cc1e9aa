"""Small convolutional backbones and SimCC coordinate-classification heads.

Backbone layout, per stage ``i`` with width ``w_i`` and stride ``s_i``::

    conv(k=s_i, stride=s_i) -> relu -> conv(3x3, pad 1) -> relu

so a 64px input with strides (2, 2, 2) leaves a ``w_3 x 8 x 8`` feature map.
The head is a pair of linear maps (x axis, y axis) from the flattened feature
map to ``K * L`` logits, reshaped to ``N x K x L``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError

VARIANT_WIDTHS = {
    "t": (4, 6, 8),
    "s": (6, 8, 12),
    "m": (8, 12, 16),
}

MODALITY_CHANNELS = {"rgb": 3, "thermal": 1}


@dataclass(frozen=True)
class BackboneConfig:
    variant: str = "s"
    input_channels: int = 1
    input_resolution: int = 64
    stage_widths: tuple | None = None
    stage_strides: tuple = (2, 2, 2)

    @property
    def widths(self) -> tuple:
        if self.stage_widths is not None:
            return tuple(self.stage_widths)
        if self.variant not in VARIANT_WIDTHS:
            raise ConfigError(f"unknown backbone variant {self.variant!r}")
        return VARIANT_WIDTHS[self.variant]

    @property
    def modality(self) -> str:
        for name, ch in MODALITY_CHANNELS.items():
            if ch == self.input_channels:
                return name
        raise ConfigError(f"no modality uses {self.input_channels} input channels")

    def validate(self):
        widths = self.widths
        if len(widths) != len(self.stage_strides):
            raise ConfigError("stage_widths and stage_strides differ in length")
        if any(w <= 0 for w in widths):
            raise ConfigError(f"zero-width stage in {widths}")
        if any(s < 1 for s in self.stage_strides):
            raise ConfigError("stage strides must be >= 1")
        if self.input_resolution % math.prod(self.stage_strides):
            raise ConfigError(
                f"resolution {self.input_resolution} not divisible by total stride "
                f"{math.prod(self.stage_strides)}"
            )

    def feature_shape(self) -> tuple:
        """(C, H_f, W_f) of the final stage."""
        side = self.input_resolution // math.prod(self.stage_strides)
        return (self.widths[-1], side, side)


@dataclass(frozen=True)
class HeadConfig:
    num_keypoints: int = 12
    split_factor: int = 2

    def bins(self, resolution: int) -> int:
        return self.split_factor * resolution


class Conv2d:
    def __init__(self, in_ch, out_ch, kernel, stride=1, pad=0, bias=True, rng=None):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.pad = kernel, stride, pad
        fan_in = in_ch * kernel * kernel
        bound = math.sqrt(6.0 / fan_in)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(rng.uniform(-bound, bound, (out_ch, in_ch, kernel, kernel)), True)
        self.bias = Tensor(np.zeros(out_ch), True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        bias = self.bias if self.bias is not None else Tensor(np.zeros(self.out_ch))
        return ag.conv2d(x, self.weight, bias, pad=self.pad, stride=self.stride)

    def out_hw(self, h, w):
        return (
            (h + 2 * self.pad - self.kernel) // self.stride + 1,
            (w + 2 * self.pad - self.kernel) // self.stride + 1,
        )

    def parameters(self) -> dict:
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return params

    def flops(self, h, w) -> int:
        ho, wo = self.out_hw(h, w)
        macs = self.in_ch * self.kernel * self.kernel * self.out_ch * ho * wo
        return 2 * macs + (self.out_ch * ho * wo if self.bias is not None else 0)


class Linear:
    def __init__(self, in_features, out_features, bias=True, rng=None):
        self.in_features, self.out_features = in_features, out_features
        bound = 1.0 / math.sqrt(in_features)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(rng.uniform(-bound, bound, (in_features, out_features)), True)
        self.bias = Tensor(np.zeros(out_features), True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ag.matmul(x, self.weight)
        return ag.add(y, self.bias) if self.bias is not None else y

    def parameters(self) -> dict:
        params = {"weight": self.weight}
        if self.bias is not None:
            params["bias"] = self.bias
        return params

    def flops(self) -> int:
        macs = self.in_features * self.out_features
        return 2 * macs + (self.out_features if self.bias is not None else 0)


class SimCCLogits(NamedTuple):
    x: Tensor
    y: Tensor


class SimCCHead:
    def __init__(self, in_shape: tuple, num_keypoints: int, bins: int, rng=None):
        self.in_shape = tuple(in_shape)
        self.num_keypoints, self.bins = num_keypoints, bins
        n_in = math.prod(in_shape)
        self.x = Linear(n_in, num_keypoints * bins, rng=rng)
        self.y = Linear(n_in, num_keypoints * bins, rng=rng)

    def __call__(self, features: Tensor) -> SimCCLogits:
        if tuple(features.shape[1:]) != self.in_shape:
            raise ShapeError(
                f"head expects features {self.in_shape}, got {tuple(features.shape[1:])}"
            )
        n = features.shape[0]
        flat = ag.reshape(features, (n, math.prod(self.in_shape)))
        shape = (n, self.num_keypoints, self.bins)
        return SimCCLogits(
            ag.reshape(self.x(flat), shape), ag.reshape(self.y(flat), shape)
        )

    def parameters(self) -> dict:
        return {
            **{f"x.{k}": v for k, v in self.x.parameters().items()},
            **{f"y.{k}": v for k, v in self.y.parameters().items()},
        }

    def flops(self) -> int:
        return self.x.flops() + self.y.flops()


@dataclass
class Model:
    config: BackboneConfig
    head_config: HeadConfig
    backbone: list
    head: SimCCHead
    frozen: bool = False
    meta: dict = field(default_factory=dict)

    @property
    def modality(self) -> str:
        return self.config.modality

    def parameters(self) -> dict:
        """Every parameter tensor, keyed by a stable dotted name."""
        params = {}
        for i, layer in enumerate(self.backbone):
            for k, v in layer.parameters().items():
                params[f"backbone.{i}.{k}"] = v
        for k, v in self.head.parameters().items():
            params[f"head.{k}"] = v
        return params

    def trainable_parameters(self) -> dict:
        return {} if self.frozen else self.parameters()

    def __call__(self, batch) -> SimCCLogits:
        return forward(self, batch)


def init_model(cfg: BackboneConfig, head_cfg: HeadConfig = HeadConfig(), seed: int = 0) -> Model:
    """Build a model with fan-in-scaled uniform weights and zero biases."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    layers = []
    in_ch = cfg.input_channels
    for width, stride in zip(cfg.widths, cfg.stage_strides):
        layers.append(Conv2d(in_ch, width, kernel=stride, stride=stride, rng=rng))
        layers.append(Conv2d(width, width, kernel=3, stride=1, pad=1, rng=rng))
        in_ch = width
    head = SimCCHead(
        cfg.feature_shape(), head_cfg.num_keypoints, head_cfg.bins(cfg.input_resolution), rng=rng
    )
    return Model(cfg, head_cfg, layers, head)


def _as_batch(batch) -> Tensor:
    return batch if isinstance(batch, Tensor) else Tensor(batch)


def forward_features(m: Model, batch) -> Tensor:
    x = _as_batch(batch)
    if x.values.ndim != 4 or x.shape[1] != m.config.input_channels:
        raise ShapeError(
            f"{m.modality} model expects N×{m.config.input_channels}×H×W, got {x.shape}"
        )
    for layer in m.backbone:
        x = ag.relu(layer(x))
    return x


def forward_head(head: SimCCHead, features: Tensor) -> SimCCLogits:
    return head(features)


def forward(m: Model, batch) -> SimCCLogits:
    return forward_head(m.head, forward_features(m, batch))


def set_frozen(m: Model, flag: bool) -> Model:
    """Frozen parameters stay in the graph as constants: no gradient is stored
    for them, but gradients still pass through to upstream tensors."""
    m.frozen = flag
    for p in m.parameters().values():
        p.requires_grad = not flag
        p.grad = None
    return m


def param_count(m, trainable: bool = True) -> int:
    """Number of scalar parameters; ``trainable=False`` counts everything."""
    if trainable and getattr(m, "frozen", False):
        return 0
    return sum(p.size for p in m.parameters().values() if p.requires_grad or not trainable)


def flop_count(m: Model, input_resolution: int | None = None) -> int:
    """2 FLOPs per multiply-accumulate plus one per bias add, conv and linear only."""
    h = w = input_resolution or m.config.input_resolution
    total = 0
    for layer in m.backbone:
        total += layer.flops(h, w)
        h, w = layer.out_hw(h, w)
    # head sized as if built for this resolution
    n_in = m.config.widths[-1] * h * w
    n_out = m.head_config.num_keypoints * m.head_config.bins(h * math.prod(m.config.stage_strides))
    return total + 2 * (2 * n_in * n_out + n_out)
