"""Training objective: weighted soft Dice plus cross-entropy."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import BadLabels, ShapeMismatch


@dataclass
class LossWeights:
    lambda1: float = 0.4  # dice
    lambda2: float = 0.6  # cross-entropy
    dice_smooth: float = 1e-6

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0 or self.dice_smooth < 0:
            raise ValueError("loss weights and smoothing must be non-negative")


def _batched(t: torch.Tensor, ndim: int) -> torch.Tensor:
    return t.unsqueeze(0) if t.dim() == ndim else t


def _check_target(target: torch.Tensor, num_classes: int) -> None:
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= num_classes):
        raise BadLabels(f"labels must lie in [0, {num_classes}); got range "
                        f"[{int(target.min())}, {int(target.max())}]")


def one_hot(target: torch.Tensor, num_classes: int, dtype=torch.float32) -> torch.Tensor:
    """(B, H, W) integer map -> (B, C, H, W)."""
    return F.one_hot(target.long(), num_classes).permute(0, 3, 1, 2).to(dtype)


def soft_dice_loss(probs: torch.Tensor, target: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Mean over classes (background included) of ``1 - (2I + eps) / (P + G + eps)``.

    Sums run over the batch and both spatial axes. ``probs`` is (C, H, W) or
    (B, C, H, W); ``target`` is the matching integer map.
    """
    probs = _batched(probs, 3)
    target = _batched(target, 2)
    if probs.shape[0] != target.shape[0] or probs.shape[2:] != target.shape[1:]:
        raise ShapeMismatch(f"probs {tuple(probs.shape)} vs target {tuple(target.shape)}")
    c = probs.shape[1]
    _check_target(target, c)
    gt = one_hot(target, c, probs.dtype)
    dims = (0, 2, 3)
    inter = (probs * gt).sum(dims)
    denom = probs.sum(dims) + gt.sum(dims)
    return (1 - (2 * inter + eps) / (denom + eps)).mean()


def cross_entropy_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of -log softmax(logits)[target] (natural log)."""
    logits = _batched(logits, 3)
    target = _batched(target, 2)
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")
    c = logits.shape[1]
    _check_target(target, c)
    if c == 1:
        return F.binary_cross_entropy_with_logits(logits[:, 0], target.to(logits.dtype))
    return F.cross_entropy(logits, target.long())


def combined_loss(logits: torch.Tensor, target: torch.Tensor, weights: LossWeights = LossWeights()) -> torch.Tensor:
    logits = _batched(logits, 3)
    target = _batched(target, 2)
    if logits.shape[1] == 1:
        p = torch.sigmoid(logits)
        probs = torch.cat([1 - p, p], dim=1)
    else:
        probs = logits.softmax(dim=1)
    dice = soft_dice_loss(probs, target, weights.dice_smooth)
    ce = cross_entropy_loss(logits, target)
    return weights.lambda1 * dice + weights.lambda2 * ce
