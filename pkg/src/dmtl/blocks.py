"""Residual, resampling and classification building blocks.

Each block is a pure function of an input tensor and a mapping of its own
parameters (local names such as ``conv1.weight``). Matching ``init_*``
functions produce those parameters.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import ops
from .autodiff.ops import ConfigError
from .autodiff.tensor import ShapeError, Tensor

NORM_EPS = 1e-5


def norm_groups(channels: int) -> int:
    return min(8, channels)


@dataclass(frozen=True)
class ResNetBlockConfig:
    channels: int
    groups: int
    kernel: int = 3

    def __post_init__(self) -> None:
        if self.channels <= 0 or self.groups <= 0 or self.channels % self.groups:
            raise ConfigError(f"{self.channels} channels are not divisible into {self.groups} groups")
        if self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")

    @classmethod
    def for_channels(cls, channels: int, kernel: int = 3) -> "ResNetBlockConfig":
        return cls(channels, norm_groups(channels), kernel)


@dataclass(frozen=True)
class ClassHeadConfig:
    in_features: int
    hidden: int = 64
    num_classes: int = 3


class Initializer:
    """Deterministic per-parameter initialisation.

    Each parameter draws from its own generator seeded by (seed, crc32(name)),
    so adding or removing a branch never shifts the values of the others.
    """

    def __init__(self, seed: int, dtype=np.float32):
        self.seed = seed
        self.dtype = np.dtype(dtype)

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, zlib.crc32(name.encode())])

    def he(self, name: str, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        std = np.sqrt(2.0 / fan_in)
        return (self._rng(name).standard_normal(shape) * std).astype(self.dtype)

    def zeros(self, shape: tuple[int, ...]) -> np.ndarray:
        return np.zeros(shape, dtype=self.dtype)

    def ones(self, shape: tuple[int, ...]) -> np.ndarray:
        return np.ones(shape, dtype=self.dtype)


def init_conv(init: Initializer, name: str, cin: int, cout: int, k: int, zero: bool = False,
              bias: bool = True) -> dict[str, np.ndarray]:
    shape = (cout, cin, k, k, k)
    w = init.zeros(shape) if zero else init.he(f"{name}.weight", shape, cin * k**3)
    out = {f"{name}.weight": w}
    if bias:
        out[f"{name}.bias"] = init.zeros((cout,))
    return out


def init_norm(init: Initializer, name: str, channels: int) -> dict[str, np.ndarray]:
    return {f"{name}.gamma": init.ones((channels,)), f"{name}.beta": init.zeros((channels,))}


def init_resnet_block(init: Initializer, prefix: str, cfg: ResNetBlockConfig) -> dict[str, np.ndarray]:
    c, k = cfg.channels, cfg.kernel
    out: dict[str, np.ndarray] = {}
    out.update(init_norm(init, f"{prefix}.norm1", c))
    # no bias on conv1: the group norm after it would cancel it
    out.update(init_conv(init, f"{prefix}.conv1", c, c, k, bias=False))
    out.update(init_norm(init, f"{prefix}.norm2", c))
    # zero second conv: the block starts as the identity map
    out.update(init_conv(init, f"{prefix}.conv2", c, c, k, zero=True))
    return out


def init_downsample(init: Initializer, prefix: str, channels: int, kernel: int = 3) -> dict[str, np.ndarray]:
    return init_conv(init, f"{prefix}.conv", channels, 2 * channels, kernel)


def init_upsample(init: Initializer, prefix: str, channels: int, kernel: int = 3) -> dict[str, np.ndarray]:
    half = channels // 2
    out = init_conv(init, f"{prefix}.up.conv", channels, half, 1)
    out.update(init_resnet_block(init, f"{prefix}.block0", ResNetBlockConfig.for_channels(half, kernel)))
    return out


def init_class_head(init: Initializer, prefix: str, cfg: ClassHeadConfig) -> dict[str, np.ndarray]:
    return {
        f"{prefix}.fc1.weight": init.he(f"{prefix}.fc1.weight", (cfg.in_features, cfg.hidden), cfg.in_features),
        f"{prefix}.fc1.bias": init.zeros((cfg.hidden,)),
        f"{prefix}.fc2.weight": init.he(f"{prefix}.fc2.weight", (cfg.hidden, cfg.num_classes), cfg.hidden),
        f"{prefix}.fc2.bias": init.zeros((cfg.num_classes,)),
    }


def scope(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    """View of ``params`` under ``prefix`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


def resnet_branch(x: Tensor, params: Mapping[str, Tensor], cfg: ResNetBlockConfig) -> Tensor:
    """First half of the residual branch: conv(relu(norm(x)))."""
    if x.ndim != 5 or x.shape[1] != cfg.channels:
        raise ShapeError(f"resnet_block: expected {cfg.channels} channels, got input {x.shape}")
    h = ops.group_norm(x, params["norm1.gamma"], params["norm1.beta"], cfg.groups, NORM_EPS)
    return ops.conv3d(ops.relu(h), params["conv1.weight"], None, 1, cfg.kernel // 2)


def resnet_merge(x: Tensor, t: Tensor, params: Mapping[str, Tensor], cfg: ResNetBlockConfig) -> Tensor:
    """Second half: x + conv(relu(norm(t)))."""
    h = ops.group_norm(t, params["norm2.gamma"], params["norm2.beta"], cfg.groups, NORM_EPS)
    h = ops.conv3d(ops.relu(h), params["conv2.weight"], params["conv2.bias"], 1, cfg.kernel // 2)
    return ops.add(x, h)


def resnet_block(x: Tensor, params: Mapping[str, Tensor], cfg: ResNetBlockConfig) -> Tensor:
    """Pre-activation residual block: x + conv(relu(norm(conv(relu(norm(x))))))."""
    return resnet_merge(x, resnet_branch(x, params, cfg), params, cfg)


def downsample_step(x: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Stride-2 convolution: halves each spatial dim, doubles channels."""
    w = params["conv.weight"]
    if x.ndim != 5 or x.shape[1] * 2 != w.shape[0]:
        raise ShapeError(f"downsample_step: input {x.shape} does not match weight {w.shape}")
    if any(s % 2 for s in x.shape[2:]):
        raise ConfigError(f"downsample_step: spatial dims {x.shape[2:]} must be even")
    return ops.conv3d(x, w, params["conv.bias"], 2, w.shape[2] // 2)


def upsample_step(x: Tensor, skip: Tensor, params: Mapping[str, Tensor], kernel: int = 3) -> Tensor:
    """Halve channels (1x1x1 conv), upsample x2, add the skip, then one residual block."""
    N, C, d, h, w = x.shape
    target = (N, C // 2, 2 * d, 2 * h, 2 * w)
    if skip.shape != target:
        raise ShapeError(f"upsample_step: skip shape {skip.shape} != expected {target}")
    y = upsample_merge(x, skip, params)
    return resnet_block(y, scope(params, "block0"), ResNetBlockConfig.for_channels(C // 2, kernel))


def upsample_merge(x: Tensor, skip: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """The part of ``upsample_step`` before its residual block."""
    y = ops.conv3d(x, params["up.conv.weight"], params["up.conv.bias"], 1, 0)
    return ops.add(ops.nearest_upsample3d(y), skip)


def class_head(bottleneck: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Pooled bottleneck -> FC -> ReLU -> FC; returns raw logits [N, num_classes]."""
    w1 = params["fc1.weight"]
    if bottleneck.ndim != 5 or bottleneck.shape[1] != w1.shape[0]:
        raise ShapeError(f"class_head: expected {w1.shape[0]} channels, got {bottleneck.shape}")
    h = ops.global_avg_pool3d(bottleneck)
    h = ops.relu(ops.fully_connected(h, w1, params["fc1.bias"]))
    return ops.fully_connected(h, params["fc2.weight"], params["fc2.bias"])
