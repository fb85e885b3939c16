"""Stage 1: gate the input image with a binarized coarse segmentation.

The coarse class map comes either from a live segmenter or from a
precomputed ``prior.u8`` file next to the case. Any class above ``tau``
(default 0, i.e. any organ) marks the region of interest; everything
outside it is zeroed. No morphological post-processing is applied.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

import numpy as np

from .errors import MissingPrior, ShapeMismatch


@dataclass(frozen=True)
class PriorSegmenter:
    identity: str
    predict: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class LocalImage:
    pixels: np.ndarray
    support_fraction: float


def binarize_prior(coarse, tau: int = 0) -> np.ndarray:
    if tau < 0:
        raise ValueError("tau must be non-negative")
    return (np.asarray(coarse) > tau).astype(np.uint8)


def mask_image(x: np.ndarray, coarse: np.ndarray, tau: int = 0) -> LocalImage:
    x = np.asarray(x)
    coarse = np.asarray(coarse)
    if coarse.shape != x.shape:
        raise ShapeMismatch(f"prior map {coarse.shape} does not match image {x.shape}")
    mask = binarize_prior(coarse, tau)
    return LocalImage(pixels=(x * mask).astype(x.dtype, copy=False),
                      support_fraction=float(mask.mean()) if mask.size else 0.0)


def apply_prior_mask(x: np.ndarray, segmenter: PriorSegmenter, tau: int = 0) -> LocalImage:
    return mask_image(x, segmenter.predict(x), tau)


def constant_segmenter(value: int, identity: Optional[str] = None) -> PriorSegmenter:
    return PriorSegmenter(identity or f"constant-{value}",
                          lambda x: np.full(np.shape(x), value, dtype=np.uint8))


def load_precomputed_prior(case_id: str, store: Union[str, Path]) -> np.ndarray:
    case_dir = Path(store) / case_id
    path = case_dir / "prior.u8"
    if not path.is_file():
        raise MissingPrior(f"no prior map stored for case {case_id!r} under {store}")
    meta = json.loads((case_dir / "meta.json").read_text())
    h, w = int(meta["height"]), int(meta["width"])
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != h * w:
        raise ShapeMismatch(f"prior for {case_id!r} has {raw.size} pixels, case is {h}x{w}")
    return raw.reshape(h, w)
