"""Builtin stage-1 coarse segmenter: a small three-level U-Net.

It stands in for an externally pre-trained prior model. Any other
segmenter can be plugged in through ``PriorSegmenter``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..datasets import CaseStore, resize_image
from ..encoders import ConvBlock, init_weights
from ..errors import CheckpointMismatch, DataError
from ..prior_gate import PriorSegmenter
from .config import AblationConfig, TrainConfig, canonical_json
from .training import dataset_classes, fit, prepare_sample, recalibrate_bn


class PriorUNet(nn.Module):
    def __init__(self, num_classes: int, base: int = 8, in_channels: int = 1):
        super().__init__()
        self.enc1 = nn.Sequential(ConvBlock(in_channels, base), ConvBlock(base, base))
        self.enc2 = nn.Sequential(ConvBlock(base, 2 * base), ConvBlock(2 * base, 2 * base))
        self.enc3 = nn.Sequential(ConvBlock(2 * base, 4 * base), ConvBlock(4 * base, 4 * base))
        self.dec2 = nn.Sequential(ConvBlock(6 * base, 2 * base), ConvBlock(2 * base, 2 * base))
        self.dec1 = nn.Sequential(ConvBlock(3 * base, base), ConvBlock(base, base))
        self.proj = nn.Conv2d(base, num_classes, 1)
        init_weights(self)

    def forward(self, x):
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        e3 = self.enc3(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([F.interpolate(e3, scale_factor=2, mode="bilinear", align_corners=False), e2], 1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, scale_factor=2, mode="bilinear", align_corners=False), e1], 1))
        return self.proj(d1)


@dataclass
class PriorModelConfig:
    num_classes: int
    base: int = 8
    input_size: Tuple[int, int] = (224, 224)


def _forward(model, x, xl):
    return model(x)


def train_prior(data_root, out_dir, train_cfg: TrainConfig, base: int = 8) -> Path:
    """Fit the builtin prior on the train split with the stage-2 training loop."""
    store = CaseStore(data_root)
    cases = store.load_split("train")
    if not cases:
        raise DataError(f"{data_root} has no training cases")
    if train_cfg.input_size[0] % 4 or train_cfg.input_size[1] % 4:
        raise DataError("prior input size must be divisible by 4")
    plain = AblationConfig(use_prior=False, use_local_encoder=False, fusion="none")
    samples = [prepare_sample(c, train_cfg.input_size, plain, None) for c in cases]
    cfg = PriorModelConfig(dataset_classes(cases), base, tuple(train_cfg.input_size))
    torch.manual_seed(train_cfg.seed)
    model = PriorUNet(cfg.num_classes, base)
    result = fit(model, samples, train_cfg, _forward)
    if train_cfg.bn_recalibrate:
        recalibrate_bn(model, samples, train_cfg.batch_size, _forward)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": model.state_dict()}, out / "prior.pt")
    meta = {"num_classes": cfg.num_classes, "base": base, "input_size": list(cfg.input_size),
            "steps": result.steps, "final_loss": result.final_loss, "train": train_cfg.to_dict()}
    (out / "prior.json").write_text(canonical_json(meta))
    return out


def load_prior_segmenter(prior_dir) -> PriorSegmenter:
    d = Path(prior_dir)
    if not (d / "prior.json").is_file() or not (d / "prior.pt").is_file():
        raise CheckpointMismatch(f"{d} does not hold a trained prior model")
    meta = json.loads((d / "prior.json").read_text())
    model = PriorUNet(int(meta["num_classes"]), int(meta["base"]))
    try:
        model.load_state_dict(torch.load(d / "prior.pt", map_location="cpu", weights_only=True)["state_dict"])
    except (RuntimeError, KeyError) as exc:
        raise CheckpointMismatch(f"{d}: {exc}") from exc
    model.eval()
    size = tuple(meta["input_size"])
    digest = hashlib.sha256((d / "prior.pt").read_bytes()).hexdigest()[:12]

    @torch.no_grad()
    def predict(image: np.ndarray) -> np.ndarray:
        h, w = np.shape(image)
        x = torch.from_numpy(resize_image(np.asarray(image, dtype=np.float32), size))[None, None]
        logits = model(x)
        if (h, w) != size:
            logits = F.interpolate(logits, size=(h, w), mode="bilinear", align_corners=False)
        return logits[0].argmax(0).numpy().astype(np.uint8)

    return PriorSegmenter(f"builtin-unet-like:{digest}", predict)


def prior_dice(seg: PriorSegmenter, cases) -> float:
    """Mean foreground-vs-background overlap of a segmenter's ROI with the labels."""
    vals = []
    for c in cases:
        p, g = seg.predict(c.image) > 0, c.label > 0
        denom = p.sum() + g.sum()
        vals.append(1.0 if denom == 0 else 2.0 * (p & g).sum() / denom)
    return float(np.mean(vals))
