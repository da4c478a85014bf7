"""Small trainable multi-resolution feature extractor.

A stride-2 stem followed by four stride-2 stages of 3x3 conv + relu blocks
produces levels at 1/4, 1/8, 1/16 and 1/32 of the input resolution.  The
fused map projects every level to a common channel count with a 1x1
convolution, resamples to the working resolution, sums, and L2-normalizes
each position's channel vector so downstream descriptor geometry holds by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .tensor import Tensor, add, conv2d, l2_normalize_positions, relu, resample


@dataclass
class BackboneConfig:
    stage_channels: tuple[int, int, int, int] = (16, 32, 64, 128)
    fused_channels: int = 64
    working_resolution: tuple[int, int] = (16, 16)  # (width, height)
    convs_per_stage: int = 2

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.working_resolution = tuple(int(v) for v in self.working_resolution)
        if len(self.stage_channels) != 4 or min(self.stage_channels) < 1:
            raise ConfigError(f"stage_channels must be 4 positive ints, got {self.stage_channels}")
        if self.fused_channels < 1:
            raise ConfigError("fused_channels must be positive")
        if min(self.working_resolution) < 1:
            raise ConfigError("working_resolution extents must be positive")
        if self.convs_per_stage < 1:
            raise ConfigError("convs_per_stage must be positive")


@dataclass
class BackboneParams:
    stem: tuple[Tensor, Tensor]                      # 3x3 stride-2 kernel + bias
    stages: list[list[tuple[Tensor, Tensor]]]        # 4 stages of (kernel, bias)
    fuse_kernels: list[Tensor]                       # four 1x1 kernels to fused_channels

    def named(self, prefix: str = "backbone"):
        yield f"{prefix}.stem.kernel", self.stem[0]
        yield f"{prefix}.stem.bias", self.stem[1]
        for i, stage in enumerate(self.stages):
            for j, (k, b) in enumerate(stage):
                yield f"{prefix}.stage{i}.conv{j}.kernel", k
                yield f"{prefix}.stage{i}.conv{j}.bias", b
        for i, k in enumerate(self.fuse_kernels):
            yield f"{prefix}.fuse{i}.kernel", k


@dataclass
class FeaturePyramid:
    levels: list[Tensor]   # four maps at 1/4 .. 1/32 resolution
    fused: Tensor          # (h, w, d) unit-norm positions at working resolution
    lowest: Tensor         # levels[-1]


def _he_kernel(rng: np.random.Generator, k: int, cin: int, cout: int) -> Tensor:
    std = np.sqrt(2.0 / (k * k * cin))
    return Tensor(rng.standard_normal((k, k, cin, cout)) * std, requires_grad=True)


def init_backbone(config: BackboneConfig, rng: np.random.Generator) -> BackboneParams:
    c0 = config.stage_channels[0]
    stem = (_he_kernel(rng, 3, 3, c0), Tensor(np.zeros(c0), requires_grad=True))
    stages = []
    cin = c0
    for cout in config.stage_channels:
        stage = []
        for _ in range(config.convs_per_stage):
            stage.append((_he_kernel(rng, 3, cin, cout),
                          Tensor(np.zeros(cout), requires_grad=True)))
            cin = cout
        stages.append(stage)
    fuse = [_he_kernel(rng, 1, c, config.fused_channels)
            for c in config.stage_channels]
    return BackboneParams(stem=stem, stages=stages, fuse_kernels=fuse)


def extract_pyramid(image: Tensor, params: BackboneParams) -> list[Tensor]:
    """Four feature levels at 1/4, 1/8, 1/16, 1/32 of the input extent."""
    h, w = image.dims[:2]
    if h % 32 or w % 32:
        raise DataError(
            f"extract_pyramid: image extents ({h}, {w}) must be divisible by 32; "
            "resize images at ingestion"
        )
    x = relu(conv2d(image, params.stem[0], params.stem[1], stride=2, padding=1))
    levels = []
    for stage in params.stages:
        for j, (kernel, bias) in enumerate(stage):
            stride = 2 if j == 0 else 1
            x = relu(conv2d(x, kernel, bias, stride=stride, padding=1))
        levels.append(x)
    return levels


def fuse_features(levels: list[Tensor], params: BackboneParams,
                  config: BackboneConfig) -> Tensor:
    """Project, resample and sum the levels; unit-normalize each position."""
    w, h = config.working_resolution
    acc = None
    for level, kernel in zip(levels, params.fuse_kernels):
        projected = conv2d(level, kernel)
        resized = resample(projected, h, w, mode="bilinear")
        acc = resized if acc is None else add(acc, resized)
    return l2_normalize_positions(acc)


def run_backbone(image: Tensor, params: BackboneParams,
                 config: BackboneConfig) -> FeaturePyramid:
    levels = extract_pyramid(image, params)
    fused = fuse_features(levels, params, config)
    return FeaturePyramid(levels=levels, fused=fused, lowest=levels[-1])
