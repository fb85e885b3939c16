"""Six-level residual encoder and the feature-refinement (FR) fusion.

Level plan at width divisor ``w`` (channels / stride vs. input)::

    0  stem              128/w   2
    1  pool + residual   256/w   4
    2  residual          512/w   8
    3  residual         1024/w  16
    4  residual         2048/w  32
    5  bottleneck       2048/w  32   (stride 1)

Level 0 is a modified stem producing 128/w channels so that every skip
level lines up with a flow-block output in the decoder.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import torch
import torch.nn as nn

from .errors import BadConfig, BadGeometry, ShapeMismatch

BASE_CHANNELS = (128, 256, 512, 1024, 2048, 2048)
STRIDES = (2, 4, 8, 16, 32, 32)
BLOCK_KINDS = ("stem", "residual-stage", "residual-stage", "residual-stage", "residual-stage", "bottleneck-stage")
DEFAULT_BLOCKS = (3, 4, 6, 3, 1)


@dataclass(frozen=True)
class EncoderLevelSpec:
    index: int
    out_channels: int
    stride_vs_input: int
    block_kind: str


def scaled(channels: int, width: int) -> int:
    if width < 1 or channels % width:
        raise BadConfig(f"width divisor {width} does not divide {channels} channels")
    return channels // width


def level_specs(width: int = 1) -> List[EncoderLevelSpec]:
    return [
        EncoderLevelSpec(i, scaled(c, width), s, k)
        for i, (c, s, k) in enumerate(zip(BASE_CHANNELS, STRIDES, BLOCK_KINDS))
    ]


def check_geometry(height: int, width: int) -> None:
    if height % 32 or width % 32 or height <= 0 or width <= 0:
        raise BadGeometry(f"input {height}x{width} is not divisible by 32")


class ConvBlock(nn.Sequential):
    """3x3 conv (padding 1) -> BatchNorm -> ReLU; spatial size is preserved."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )


class Bottleneck(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        mid = max(out_channels // 4, 1)
        self.conv1 = nn.Conv2d(in_channels, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = nn.Conv2d(mid, mid, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv3 = nn.Conv2d(mid, out_channels, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


def _residual_stage(in_channels: int, out_channels: int, blocks: int, stride: int) -> nn.Sequential:
    layers = [Bottleneck(in_channels, out_channels, stride)]
    layers += [Bottleneck(out_channels, out_channels) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class Encoder(nn.Module):
    """One encoder stream. ``forward`` returns the six-level pyramid.

    ``stage(i, f)`` runs a single level so that callers can interleave
    cross-stream fusion between levels.
    """

    def __init__(self, in_channels: int = 1, width: int = 1, blocks: Sequence[int] = DEFAULT_BLOCKS):
        super().__init__()
        if len(blocks) != 5 or min(blocks) < 1:
            raise BadConfig(f"need five positive residual block counts, got {tuple(blocks)}")
        self.specs = level_specs(width)
        ch = [s.out_channels for s in self.specs]
        stem_ch = ch[0]
        self.stages = nn.ModuleList([
            nn.Sequential(
                nn.Conv2d(in_channels, stem_ch, 7, stride=2, padding=3, bias=False),
                nn.BatchNorm2d(stem_ch),
                nn.ReLU(inplace=True),
                ConvBlock(stem_ch, ch[0]),
            ),
            nn.Sequential(
                nn.MaxPool2d(3, stride=2, padding=1),
                _residual_stage(ch[0], ch[1], blocks[0], 1),
            ),
            _residual_stage(ch[1], ch[2], blocks[1], 2),
            _residual_stage(ch[2], ch[3], blocks[2], 2),
            _residual_stage(ch[3], ch[4], blocks[3], 2),
            _residual_stage(ch[4], ch[5], blocks[4], 1),
        ])
        init_weights(self)
        for m in self.modules():
            if isinstance(m, Bottleneck):
                nn.init.zeros_(m.bn3.weight)  # residual branches start as identity

    @property
    def channels(self) -> List[int]:
        return [s.out_channels for s in self.specs]

    def stage(self, index: int, f: torch.Tensor) -> torch.Tensor:
        return self.stages[index](f)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        check_geometry(x.shape[-2], x.shape[-1])
        levels = []
        f = x
        for i in range(len(self.stages)):
            f = self.stage(i, f)
            levels.append(f)
        return levels


class FeatureRefine(nn.Module):
    """Channel concatenation of the deepest encoder features, then two conv blocks."""

    def __init__(self, in_channels: int, mid_channels: int, out_channels: int):
        super().__init__()
        self.block1 = ConvBlock(in_channels, mid_channels)
        self.block2 = ConvBlock(mid_channels, out_channels)
        init_weights(self)

    def forward(self, *features: torch.Tensor) -> torch.Tensor:
        first = features[0]
        for f in features[1:]:
            if f.shape != first.shape:
                raise ShapeMismatch(f"cannot fuse {tuple(first.shape)} with {tuple(f.shape)}")
        x = torch.cat(features, dim=1) if len(features) > 1 else first
        return self.block2(self.block1(x))


def init_weights(module: nn.Module) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
