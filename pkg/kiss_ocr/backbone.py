"""
The ResNet-style feature extractor with group normalization. It is instantiated twice, once on the full word image
for the localizer and once on the ROI crops for the recognizer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .layers import Conv2d, GroupNorm, Module
from .tensor import ShapeMismatchError, Tensor, relu


@dataclass(frozen=True)
class BackboneConfig:
    """
    `input_size` is `(width, height)` in pixels. Every stage starts with a stride 2 block.
    """

    stage_channels: tuple[int, ...] = (32, 64, 128)
    blocks_per_stage: tuple[int, ...] = (2, 2, 2)
    input_size: tuple[int, int] = (200, 64)
    norm_groups: int = 8
    in_channels: int = 1

    def __post_init__(self) -> None:
        if len(self.stage_channels) != len(self.blocks_per_stage) or not self.stage_channels:
            raise ValueError(
                f"stage_channels {self.stage_channels} and blocks_per_stage {self.blocks_per_stage} must have the "
                "same, non-zero length"
            )
        if any(blocks < 1 for blocks in self.blocks_per_stage):
            raise ValueError(f"Every stage needs at least one block, got {self.blocks_per_stage}")
        if self.norm_groups < 1 or any(channels % self.norm_groups for channels in self.stage_channels):
            raise ValueError(f"All stage channels {self.stage_channels} must be divisible by {self.norm_groups}")
        if self.in_channels not in (1, 3):
            raise ValueError(f"Only grayscale or RGB inputs are supported, got {self.in_channels} channels")
        if min(self.input_size) < 1:
            raise ValueError(f"Invalid input size {self.input_size}")

    @classmethod
    def resnet18(cls, input_size: tuple[int, int] = (200, 64), in_channels: int = 1) -> BackboneConfig:
        return cls(
            stage_channels=(64, 128, 256, 512),
            blocks_per_stage=(2, 2, 2, 2),
            input_size=input_size,
            norm_groups=8,
            in_channels=in_channels,
        )

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1]

    def output_size(self) -> tuple[int, int]:
        """
        Returns the `(width, height)` of the feature map. The stem keeps the size, every stage halves it with a
        3x3 convolution of stride 2 and padding 1.
        """
        width, height = self.input_size
        for _ in self.stage_channels:
            width = (width - 1) // 2 + 1
            height = (height - 1) // 2 + 1
        return width, height


class FeatureMap(NamedTuple):
    tensor: Tensor
    source_size: tuple[int, int]


class ResidualBlock(Module):
    """
    Computes `f(x) + shortcut(x)` with `f = conv-norm-relu-conv-norm`. The shortcut is the identity unless the block
    changes the stride or the channel count, then it is a 1x1 convolution followed by a group norm.
    """

    def __init__(
        self, in_channels: int, out_channels: int, stride: int, norm_groups: int, rng: np.random.Generator
    ) -> None:
        super().__init__()
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng, stride=stride, padding=1)
        self.norm1 = GroupNorm(norm_groups, out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng, stride=1, padding=1)
        self.norm2 = GroupNorm(norm_groups, out_channels)
        self.projection: Conv2d | None = None
        self.projection_norm: GroupNorm | None = None
        if stride != 1 or in_channels != out_channels:
            self.projection = Conv2d(in_channels, out_channels, 1, rng, stride=stride)
            self.projection_norm = GroupNorm(norm_groups, out_channels)

    def shortcut(self, image: Tensor) -> Tensor:
        if self.projection is None or self.projection_norm is None:
            return image
        return self.projection_norm(self.projection(image))

    def forward(self, image: Tensor) -> Tensor:
        residual = self.norm2(self.conv2(relu(self.norm1(self.conv1(image)))))
        return residual + self.shortcut(image)


class Backbone(Module):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.config = config
        first = config.stage_channels[0]
        self.stem = Conv2d(config.in_channels, first, 3, rng, stride=1, padding=1)
        self.stem_norm = GroupNorm(config.norm_groups, first)
        blocks = []
        channels = first
        for stage_channels, block_count in zip(config.stage_channels, config.blocks_per_stage):
            for index in range(block_count):
                blocks.append(
                    ResidualBlock(channels, stage_channels, 2 if index == 0 else 1, config.norm_groups, rng)
                )
                channels = stage_channels
        self.blocks = blocks

    def forward(self, image: Tensor) -> FeatureMap:
        return extract_features(image, self)


def extract_features(image: Tensor, backbone: Backbone) -> FeatureMap:
    """
    Run the backbone on an `(N, C, H, W)` batch whose size matches the configured input size.
    """
    config = backbone.config
    width, height = config.input_size
    if image.ndim != 4 or image.shape[1] != config.in_channels or image.shape[2:] != (height, width):
        raise ShapeMismatchError(
            f"extract_features: expected images of shape (N, {config.in_channels}, {height}, {width}), "
            f"got {image.shape}"
        )
    features = relu(backbone.stem_norm(backbone.stem(image)))
    for block in backbone.blocks:
        features = block(features)
    return FeatureMap(features, (width, height))


def global_pool(feature_map: FeatureMap) -> Tensor:
    """
    Spatial mean per channel, `(N, C, H, W) -> (N, C)`.
    """
    return feature_map.tensor.mean(axis=(2, 3))
