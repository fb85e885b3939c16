"""Flow module, flow-based decoder and output head.

The flow module broadcasts the refined global context to every decoder
resolution. Decoder level 1 fuses the global context with the stride-32
skip directly; each later level upsamples the previous decoder output by 2
and fuses it with ``skip + flow`` at that resolution. The head restores the
full input resolution.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import ConvBlock, init_weights, scaled
from .errors import BadConfig, ShapeMismatch

BASE_FLOW_PAIRS = ((1024, 2), (512, 4), (256, 8), (128, 16))
BASE_DECODER_CHANNELS = (1024, 512, 256, 128, 64)
VALID_FACTORS = (2, 4, 8, 16)


def upsample(x: torch.Tensor, factor: int) -> torch.Tensor:
    return F.interpolate(x, scale_factor=factor, mode="bilinear", align_corners=False)


@dataclass(frozen=True)
class FlowSpec:
    pairs: Tuple[Tuple[int, int], ...]

    @classmethod
    def for_width(cls, width: int = 1) -> "FlowSpec":
        return cls(tuple((scaled(c, width), s) for c, s in BASE_FLOW_PAIRS))

    def validate(self) -> None:
        cs = [c for c, _ in self.pairs]
        ss = [s for _, s in self.pairs]
        if any(s not in VALID_FACTORS for s in ss):
            raise BadConfig(f"upsample factors must be in {VALID_FACTORS}, got {ss}")
        if any(b <= a for a, b in zip(ss, ss[1:])):
            raise BadConfig(f"upsample factors must strictly increase, got {ss}")
        if any(c < 1 for c in cs) or any(b >= a for a, b in zip(cs, cs[1:])):
            raise BadConfig(f"flow channels must be positive and strictly decrease, got {cs}")


def decoder_channels(width: int = 1) -> List[int]:
    return [scaled(c, width) for c in BASE_DECODER_CHANNELS]


class FlowBlock(nn.Module):
    """Bilinear upsample by ``factor``, then two conv blocks to ``channels``."""

    def __init__(self, in_channels: int, channels: int, factor: int):
        super().__init__()
        if factor not in VALID_FACTORS or channels < 1:
            raise BadConfig(f"invalid flow pair (c={channels}, s={factor})")
        self.factor = factor
        self.block1 = ConvBlock(in_channels, channels)
        self.block2 = ConvBlock(channels, channels)

    def forward(self, g: torch.Tensor) -> torch.Tensor:
        return self.block2(self.block1(upsample(g, self.factor)))


class DecoderBlock(nn.Module):
    """Concatenate the two inputs along channels, then two conv blocks."""

    def __init__(self, in_a: int, in_b: int, out_channels: int):
        super().__init__()
        self.block1 = ConvBlock(in_a + in_b, out_channels)
        self.block2 = ConvBlock(out_channels, out_channels)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if a.shape[-2:] != b.shape[-2:]:
            raise ShapeMismatch(f"decoder inputs at different resolutions: {tuple(a.shape)} vs {tuple(b.shape)}")
        return self.block2(self.block1(torch.cat([a, b], dim=1)))


class FlowDecoder(nn.Module):
    """Flow bank plus the five decoder blocks.

    ``skip_channels`` lists encoder levels 0..4; level 4 feeds decoder
    level 1 and level ``5 - i`` feeds decoder level ``i``.
    """

    def __init__(self, global_channels: int, skip_channels: Sequence[int],
                 out_channels: Sequence[int], flow_spec: FlowSpec):
        super().__init__()
        flow_spec.validate()
        if len(skip_channels) != 5 or len(out_channels) != 5 or len(flow_spec.pairs) != 4:
            raise BadConfig("decoder needs 5 skip levels, 5 output widths and 4 flow pairs")
        self.flow_spec = flow_spec
        self.flows = nn.ModuleList([FlowBlock(global_channels, c, s) for c, s in flow_spec.pairs])
        blocks = [DecoderBlock(global_channels, skip_channels[4], out_channels[0])]
        for i in range(2, 6):
            blocks.append(DecoderBlock(out_channels[i - 2], skip_channels[5 - i], out_channels[i - 1]))
        self.blocks = nn.ModuleList(blocks)
        init_weights(self)

    def flow_maps(self, g: torch.Tensor) -> List[torch.Tensor]:
        return [fb(g) for fb in self.flows]

    def decode(self, g: torch.Tensor, skips: Sequence[torch.Tensor],
               flows: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        levels = [self.blocks[0](g, skips[4])]
        for i in range(2, 6):
            skip, flow = skips[5 - i], flows[i - 2]
            if skip.shape != flow.shape:
                raise ShapeMismatch(
                    f"decoder level {i}: skip {tuple(skip.shape)} and flow {tuple(flow.shape)} differ")
            levels.append(self.blocks[i - 1](upsample(levels[-1], 2), skip + flow))
        return levels

    def forward(self, g: torch.Tensor, skips: Sequence[torch.Tensor]) -> List[torch.Tensor]:
        return self.decode(g, skips, self.flow_maps(g))


class OutputHead(nn.Module):
    """Two conv blocks, 1x1 projection to class logits, x2 upsample to input size."""

    def __init__(self, in_channels: int, num_classes: int, activation: str = "auto",
                 mid_channels: Optional[int] = None):
        super().__init__()
        if num_classes < 1:
            raise BadConfig("num_classes must be >= 1")
        if activation == "auto":
            activation = "softmax" if num_classes > 1 else "sigmoid"
        if activation not in ("softmax", "sigmoid"):
            raise BadConfig(f"unknown output activation {activation!r}")
        self.activation = activation
        mid = mid_channels or in_channels
        self.block1 = ConvBlock(in_channels, mid)
        self.block2 = ConvBlock(mid, mid)
        self.proj = nn.Conv2d(mid, num_classes, 1)
        init_weights(self)

    def forward(self, d5: torch.Tensor) -> torch.Tensor:
        return upsample(self.proj(self.block2(self.block1(d5))), 2)

    def probabilities(self, logits: torch.Tensor) -> torch.Tensor:
        return to_probabilities(logits, self.activation)


def to_probabilities(logits: torch.Tensor, activation: str = "auto") -> torch.Tensor:
    if activation == "auto":
        activation = "softmax" if logits.shape[-3] > 1 else "sigmoid"
    if activation == "softmax":
        return logits.softmax(dim=-3)
    return torch.sigmoid(logits)
