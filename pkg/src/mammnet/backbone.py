"""Shared-weight multi-scale CNN feature extractor.

A small residual network with four stride-2 stages after a stride-2 stem,
producing maps at strides 4, 8, 16 and 32.  It stands in for EfficientNet-b3:
downstream modules only depend on the stride structure and channel counts.
"""

from __future__ import annotations

import torch
from torch import nn

from .config import ModelConfig
from .errors import ShapeError

STRIDES = (4, 8, 16, 32)


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm1 = _norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.norm2 = _norm(channels)
        self.act = nn.ReLU()

    def forward(self, x):
        y = self.act(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.act(x + y)


class Stage(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.down = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1, bias=False),
            _norm(out_channels),
            nn.ReLU(),
        )
        self.block = ResidualBlock(out_channels)

    def forward(self, x):
        return self.block(self.down(x))


class Backbone(nn.Module):
    """Maps a ``(B, 1, H, W)`` image batch to four feature maps.

    The same module instance processes both views, so every parameter is
    shared between the CC and MLO paths.
    """

    def __init__(self, channels=(32, 64, 128, 256)):
        super().__init__()
        channels = tuple(channels)
        stem_channels = max(channels[0] // 2, 8)
        self.channels = channels
        self.stem = nn.Sequential(
            nn.Conv2d(1, stem_channels, 3, stride=2, padding=1, bias=False),
            _norm(stem_channels),
            nn.ReLU(),
        )
        ins = (stem_channels,) + channels[:-1]
        self.stages = nn.ModuleList(Stage(i, o) for i, o in zip(ins, channels))

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "Backbone":
        return cls(cfg.backbone_channels)

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        if image.dim() == 2:
            image = image[None, None]
        elif image.dim() == 3:
            image = image[:, None]
        if image.dim() != 4 or image.shape[1] != 1:
            raise ShapeError(f"expected a (B, 1, H, W) grayscale batch, got {tuple(image.shape)}")
        check_stride_divisible(image.shape[-2], image.shape[-1])
        x = self.stem(image)
        pyramid = []
        for stage in self.stages:
            x = stage(x)
            pyramid.append(x)
        return pyramid


def check_stride_divisible(height: int, width: int, stride: int = 32) -> None:
    if height % stride:
        raise ShapeError(f"image height {height} is not divisible by {stride}")
    if width % stride:
        raise ShapeError(f"image width {width} is not divisible by {stride}")


def extract_features(backbone: Backbone, image) -> list[torch.Tensor]:
    """Run ``backbone`` on one image (H×W array or tensor) and return its pyramid."""
    image = torch.as_tensor(image, dtype=next(backbone.parameters()).dtype)
    return backbone(image)
