"""Cross-stream fusion between the global and local encoders.

The main path is symmetric cross-attention (SCA): the global stream queries
the local one and vice versa, each branch with its own projections and a
residual connection back to its query source. Tokens are spatial positions
carrying the full channel vector; no positional encoding is added.

The other fusion kinds exist for the fusion-type ablation.
"""
from __future__ import annotations

import math
from typing import NamedTuple, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from .errors import BadConfig, ShapeMismatch

FUSION_KINDS = ("none", "concat", "cross_attention", "sca")


class ScaOutput(NamedTuple):
    global_enhanced: torch.Tensor
    local_enhanced: torch.Tensor


def tokenize(f: torch.Tensor) -> torch.Tensor:
    """(B, C, h, w) -> (B, h*w, C), row-major over space. Unbatched maps are accepted."""
    if f.dim() == 3:
        return tokenize(f.unsqueeze(0)).squeeze(0)
    return f.flatten(2).transpose(1, 2)


def detokenize(tokens: torch.Tensor, height: int, width: int) -> torch.Tensor:
    if tokens.dim() == 2:
        return detokenize(tokens.unsqueeze(0), height, width).squeeze(0)
    b, n, c = tokens.shape
    if n != height * width:
        raise ShapeMismatch(f"{n} tokens cannot form a {height}x{width} map")
    return tokens.transpose(1, 2).reshape(b, c, height, width)


def cross_attend(
    q_src: torch.Tensor,
    kv_src: torch.Tensor,
    q_proj: nn.Linear,
    k_proj: nn.Linear,
    v_proj: nn.Linear,
    out_proj: nn.Linear,
    heads: int,
) -> torch.Tensor:
    """Multi-head attention with queries from ``q_src`` and keys/values from ``kv_src``.

    Both inputs are token sequences (B, N, C). The result keeps the shape of
    ``q_src`` because the query source is added back as a residual.
    """
    c = q_src.shape[-1]
    if kv_src.shape[-1] != c:
        raise ShapeMismatch(f"token widths differ: {c} vs {kv_src.shape[-1]}")
    if heads < 1 or c % heads:
        raise BadConfig(f"{c} channels cannot be split into {heads} heads")
    b, nq, _ = q_src.shape
    nk = kv_src.shape[1]
    d = c // heads

    q = q_proj(q_src).view(b, nq, heads, d).transpose(1, 2)
    k = k_proj(kv_src).view(b, nk, heads, d).transpose(1, 2)
    v = v_proj(kv_src).view(b, nk, heads, d).transpose(1, 2)

    scores = q @ k.transpose(-2, -1) / math.sqrt(d)
    attn = scores.softmax(dim=-1)
    out = (attn @ v).transpose(1, 2).reshape(b, nq, c)
    return out_proj(out) + q_src


class CrossAttention(nn.Module):
    """One attention branch: query stream attends to the other stream."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if heads < 1 or channels % heads:
            raise BadConfig(f"{channels} channels cannot be split into {heads} heads")
        self.heads = heads
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, channels)

    def forward(self, query_map: torch.Tensor, context_map: torch.Tensor) -> torch.Tensor:
        h, w = query_map.shape[-2:]
        out = cross_attend(tokenize(query_map), tokenize(context_map),
                           self.q, self.k, self.v, self.out, self.heads)
        return detokenize(out, h, w)


class SymmetricCrossAttention(nn.Module):
    """Global branch (Q from global, K/V from local) and local branch (the reverse).

    Both branches read the original inputs, so neither depends on the other's output.
    """

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.global_branch = CrossAttention(channels, heads)
        self.local_branch = CrossAttention(channels, heads)

    def forward(self, ge: torch.Tensor, le: torch.Tensor) -> ScaOutput:
        if ge.shape != le.shape:
            raise ShapeMismatch(f"stream shapes differ: {tuple(ge.shape)} vs {tuple(le.shape)}")
        return ScaOutput(self.global_branch(ge, le), self.local_branch(le, ge))


class OneWayCrossAttention(nn.Module):
    """Only the global stream is enhanced by attending to the local stream."""

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        self.global_branch = CrossAttention(channels, heads)

    def forward(self, ge, le) -> ScaOutput:
        if ge.shape != le.shape:
            raise ShapeMismatch(f"stream shapes differ: {tuple(ge.shape)} vs {tuple(le.shape)}")
        return ScaOutput(self.global_branch(ge, le), le)


class ConcatFusion(nn.Module):
    """Channel concatenation compressed by a 1x1 conv; the fused map replaces the global stream."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, ge, le) -> ScaOutput:
        if ge.shape != le.shape:
            raise ShapeMismatch(f"stream shapes differ: {tuple(ge.shape)} vs {tuple(le.shape)}")
        return ScaOutput(self.proj(torch.cat([ge, le], dim=1)), le)


def make_fusion(kind: str, channels: int, heads: int) -> Optional[nn.Module]:
    if kind == "none":
        return None
    if kind == "concat":
        return ConcatFusion(channels)
    if kind == "cross_attention":
        return OneWayCrossAttention(channels, heads)
    if kind == "sca":
        return SymmetricCrossAttention(channels, heads)
    raise BadConfig(f"unknown fusion kind {kind!r}; expected one of {FUSION_KINDS}")


def validate_levels(levels: Sequence[int], channels: Sequence[int], heads: int) -> Tuple[int, ...]:
    levels = tuple(sorted(set(int(i) for i in levels)))
    for i in levels:
        if not 0 <= i <= 4:
            raise BadConfig(f"fusion level {i} must be in 0..4 so a later stage consumes it")
        if heads < 1 or channels[i] % heads or channels[i] < heads:
            raise BadConfig(f"level {i} has {channels[i]} channels, not divisible by {heads} heads")
    return levels


def fuse_levels(ge: torch.Tensor, le: torch.Tensor, module: nn.Module) -> ScaOutput:
    """Apply a fusion module to one level pair (thin functional entry point)."""
    return module(ge, le)


def zero_value_paths(module: nn.Module) -> None:
    """Zero every value and output projection below ``module`` (weights and biases)."""
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, CrossAttention):
                for lin in (m.v, m.out):
                    lin.weight.zero_()
                    lin.bias.zero_()

