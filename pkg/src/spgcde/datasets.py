"""Case store, synthetic low-contrast organ generator, paired augmentation.

Store layout (one directory per case)::

    <root>/<case_id>/image.f32   row-major little-endian float32, H*W values
    <root>/<case_id>/label.u8    row-major uint8 class map
    <root>/<case_id>/prior.u8    optional coarse class map (same layout)
    <root>/<case_id>/meta.json   {height, width, spacing, split, num_classes}

An optional ``<root>/dataset.json`` carries ``class_names`` for reports.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import BadSpec, CorruptCase, DataError

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


@dataclass(eq=False)
class ImageCase:
    case_id: str
    image: np.ndarray  # float32 (H, W) in [0, 1]
    label: np.ndarray  # uint8 (H, W)
    spacing: Tuple[float, float] = (1.0, 1.0)
    split: str = "train"
    num_classes: int = 4
    prior: Optional[np.ndarray] = None

    def __post_init__(self):
        self.image = np.ascontiguousarray(self.image, dtype=np.float32)
        self.label = np.ascontiguousarray(self.label, dtype=np.uint8)
        if self.prior is not None:
            self.prior = np.ascontiguousarray(self.prior, dtype=np.uint8)
        self.spacing = (float(self.spacing[0]), float(self.spacing[1]))
        if self.image.shape != self.label.shape:
            raise DataError(f"{self.case_id}: image {self.image.shape} vs label {self.label.shape}")
        if self.label.size and int(self.label.max()) >= self.num_classes:
            raise DataError(f"{self.case_id}: label value {int(self.label.max())} >= {self.num_classes} classes")
        if min(self.spacing) <= 0:
            raise DataError(f"{self.case_id}: spacing must be positive")
        if self.split not in SPLITS:
            raise DataError(f"{self.case_id}: unknown split {self.split!r}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.image.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, ImageCase):
            return NotImplemented
        same_prior = (self.prior is None and other.prior is None) or (
            self.prior is not None and other.prior is not None
            and np.array_equal(self.prior, other.prior))
        return (self.case_id == other.case_id and self.spacing == other.spacing
                and self.split == other.split and self.num_classes == other.num_classes
                and self.image.tobytes() == other.image.tobytes()
                and np.array_equal(self.label, other.label) and same_prior)


# ---------------------------------------------------------------------------
# store

def _meta(case: ImageCase) -> dict:
    h, w = case.shape
    return {"height": h, "width": w, "spacing": list(case.spacing),
            "split": case.split, "num_classes": case.num_classes}


def store_case(root, case: ImageCase) -> Path:
    d = Path(root) / case.case_id
    d.mkdir(parents=True, exist_ok=True)
    case.image.astype("<f4").tofile(d / "image.f32")
    case.label.tofile(d / "label.u8")
    if case.prior is not None:
        case.prior.tofile(d / "prior.u8")
    (d / "meta.json").write_text(json.dumps(_meta(case), indent=2, sort_keys=True) + "\n")
    return d


def _read_map(path: Path, dtype, h: int, w: int, case_id: str) -> np.ndarray:
    raw = np.fromfile(path, dtype=dtype)
    if raw.size != h * w:
        raise CorruptCase(f"{case_id}: {path.name} holds {raw.size} values, meta.json says {h}x{w}")
    return raw.reshape(h, w)


class CaseStore:
    """Reader/writer for a store root. Counts clamped images instead of failing on them."""

    def __init__(self, root):
        self.root = Path(root)
        self.clamp_warnings = 0

    def case_ids(self, split: Optional[str] = None) -> List[str]:
        if not self.root.is_dir():
            raise DataError(f"dataset root {self.root} does not exist")
        ids = []
        for d in sorted(p for p in self.root.iterdir() if (p / "meta.json").is_file()):
            if split is None or json.loads((d / "meta.json").read_text()).get("split") == split:
                ids.append(d.name)
        return ids

    def load(self, case_id: str) -> ImageCase:
        d = self.root / case_id
        try:
            meta = json.loads((d / "meta.json").read_text())
            h, w = int(meta["height"]), int(meta["width"])
        except (OSError, ValueError, KeyError) as exc:
            raise CorruptCase(f"{case_id}: unreadable meta.json ({exc})") from exc
        image = _read_map(d / "image.f32", "<f4", h, w, case_id).astype(np.float32)
        label = _read_map(d / "label.u8", np.uint8, h, w, case_id)
        prior = None
        if (d / "prior.u8").is_file():
            prior = _read_map(d / "prior.u8", np.uint8, h, w, case_id)
        if image.size and (image.min() < 0 or image.max() > 1 or not np.isfinite(image).all()):
            self.clamp_warnings += 1
            log.warning("%s: intensities outside [0, 1] clamped", case_id)
            image = np.clip(np.nan_to_num(image), 0.0, 1.0).astype(np.float32)
        return ImageCase(case_id, image, label, tuple(meta.get("spacing", (1.0, 1.0))),
                         meta.get("split", "train"), int(meta.get("num_classes", 2)), prior)

    def load_split(self, split: str) -> List[ImageCase]:
        return [self.load(cid) for cid in self.case_ids(split)]

    def store(self, case: ImageCase) -> Path:
        return store_case(self.root, case)

    @property
    def class_names(self) -> Optional[List[str]]:
        p = self.root / "dataset.json"
        if p.is_file():
            return list(json.loads(p.read_text()).get("class_names", [])) or None
        return None

    def write_class_names(self, names: Sequence[str]) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "dataset.json").write_text(
            json.dumps({"class_names": list(names)}, indent=2) + "\n")


def load_case(root, case_id: str) -> ImageCase:
    return CaseStore(root).load(case_id)


def default_class_names(num_classes: int) -> List[str]:
    return [f"class{k}" for k in range(1, num_classes)]


# ---------------------------------------------------------------------------
# synthetic generator

@dataclass
class SynthSpec:
    num_cases: int = 40
    size: Tuple[int, int] = (64, 64)
    num_classes: int = 4
    contrast_gap: float = 0.2
    seed: int = 0
    noise_sigma: float = 0.05
    background_mean: float = 0.5
    spacing: Tuple[float, float] = (1.0, 1.0)
    split_fractions: Tuple[float, float, float] = (0.7, 0.15, 0.15)
    axis_range: Tuple[float, float] = (0.07, 0.16)  # semi-axis as a fraction of min(H, W)
    prior_dilation: Optional[int] = 2  # None: no prior.u8 written

    def __post_init__(self):
        self.size = tuple(int(s) for s in self.size)
        h, w = self.size
        if h <= 0 or w <= 0 or h % 32 or w % 32:
            raise BadSpec(f"size {h}x{w} must be divisible by 32")
        if not 0 < self.contrast_gap <= 0.2:
            raise BadSpec("contrast_gap must be in (0, 0.2]")
        if self.num_classes < 2 or self.num_classes > 255:
            raise BadSpec("num_classes must be in [2, 255]")
        if self.num_cases < 1:
            raise BadSpec("num_cases must be positive")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) < 0:
            raise BadSpec("split fractions must be non-negative and sum to 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise BadSpec(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Ellipse:
    label: int
    cy: float
    cx: float
    a: float  # semi-axis along the rotated x direction
    b: float
    theta: float

    def contains(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        dy, dx = yy - self.cy, xx - self.cx
        c, s = np.cos(self.theta), np.sin(self.theta)
        u = (dx * c + dy * s) / self.a
        v = (-dx * s + dy * c) / self.b
        return u * u + v * v <= 1.0


def class_offsets(num_classes: int, gap: float) -> List[float]:
    """Intensity offset per foreground class: +g, -g, then shrinking +/- pairs (2g/3 for three organs)."""
    n = num_classes - 1
    levels = (n + 1) // 2
    out = []
    for k in range(n):
        mag = gap * (1.0 - (k // 2) / (levels + 1)) if levels > 1 else gap
        out.append(mag if k % 2 == 0 else -mag)
    return out


def _split_for(index: int, spec: SynthSpec) -> str:
    n = spec.num_cases
    n_train = int(round(spec.split_fractions[0] * n))
    n_val = int(round(spec.split_fractions[1] * n))
    if index < n_train:
        return "train"
    if index < n_train + n_val:
        return "val"
    return "test"


def _disk(radius: int) -> np.ndarray:
    yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return xx * xx + yy * yy <= radius * radius


def draw_case(spec: SynthSpec, index: int, max_retries: int = 200) -> Tuple[ImageCase, List[Ellipse]]:
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    short = min(h, w)
    lo, hi = spec.axis_range
    label = np.zeros((h, w), dtype=np.uint8)
    guard = np.zeros((h, w), dtype=bool)  # occupied pixels plus a one-pixel margin
    ellipses = []
    for k in range(1, spec.num_classes):
        for _ in range(max_retries):
            a, b = rng.uniform(lo * short, hi * short, size=2)
            theta = rng.uniform(0.0, np.pi)
            r = max(a, b) + 1.0
            if 2 * r >= short:
                continue
            cy = rng.uniform(r, h - 1 - r)
            cx = rng.uniform(r, w - 1 - r)
            e = Ellipse(k, cy, cx, a, b, theta)
            m = e.contains(yy, xx)
            if m.sum() >= 4 and not (m & guard).any():
                label[m] = k
                guard |= ndimage.binary_dilation(m, iterations=1)
                ellipses.append(e)
                break
        else:
            raise BadSpec(f"could not place organ {k} of case {index} without overlap "
                          f"after {max_retries} tries")

    offsets = class_offsets(spec.num_classes, spec.contrast_gap)
    image = np.full((h, w), spec.background_mean, dtype=np.float64)
    for k, off in enumerate(offsets, start=1):
        image[label == k] += off
    image += rng.normal(0.0, spec.noise_sigma, size=(h, w))
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    prior = None
    if spec.prior_dilation is not None:
        prior = ndimage.grey_dilation(label, footprint=_disk(spec.prior_dilation)).astype(np.uint8)
    case = ImageCase(f"case{index:04d}", image, label, spec.spacing, _split_for(index, spec),
                     spec.num_classes, prior)
    return case, ellipses


def generate_synthetic(spec: SynthSpec) -> List[ImageCase]:
    return [draw_case(spec, i)[0] for i in range(spec.num_cases)]


def write_synthetic(spec: SynthSpec, root) -> List[ImageCase]:
    cases = generate_synthetic(spec)
    store = CaseStore(root)
    store.write_class_names([f"organ{k}" for k in range(1, spec.num_classes)])
    for c in cases:
        store.store(c)
    return cases


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentParams:
    quarter_turns: int = 0  # clockwise
    flip_h: bool = False
    flip_v: bool = False
    angle: float = 0.0  # degrees, small-angle rotation (applied last)

    @property
    def is_identity(self) -> bool:
        return self.quarter_turns % 4 == 0 and not self.flip_h and not self.flip_v and self.angle == 0.0


def augment_seed(global_seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([global_seed, epoch, index]).generate_state(1)[0])


def draw_augment(seed: int, square: bool = True, small_angle: bool = False) -> AugmentParams:
    rng = np.random.default_rng(seed)
    k = int(rng.integers(4))
    if not square:
        k = 2 * (k % 2)
    flip_h = bool(rng.random() < 0.5)
    flip_v = bool(rng.random() < 0.5)
    angle = 0.0
    if small_angle and rng.random() < 0.5:
        angle = float(rng.uniform(-20.0, 20.0))
    return AugmentParams(k, flip_h, flip_v, angle)


def apply_augment(arr: np.ndarray, p: AugmentParams, nearest: bool = False) -> np.ndarray:
    out = np.rot90(arr, -p.quarter_turns)
    if p.flip_h:
        out = out[:, ::-1]
    if p.flip_v:
        out = out[::-1, :]
    if p.angle:
        out = ndimage.rotate(out, p.angle, reshape=False, order=0 if nearest else 1,
                             mode="constant", cval=0)
    return np.ascontiguousarray(out)


def augment_pair(global_img, local_img, label, seed: int, small_angle: bool = False,
                 params: Optional[AugmentParams] = None):
    """One seeded draw of rotation/flip applied identically to all three arrays."""
    if not (np.shape(global_img) == np.shape(local_img) == np.shape(label)):
        raise DataError("augment_pair needs equal shapes")
    if params is None:
        h, w = np.shape(global_img)
        params = draw_augment(seed, square=h == w, small_angle=small_angle)
    if params.is_identity:
        return global_img, local_img, label
    return (apply_augment(global_img, params), apply_augment(local_img, params),
            apply_augment(label, params, nearest=True))


# ---------------------------------------------------------------------------
# resizing

def resize_image(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    if tuple(image.shape) == tuple(size):
        return image
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None, None]
    return F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)[0, 0].numpy()


def resize_labels(label: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    if tuple(label.shape) == tuple(size):
        return label
    t = torch.from_numpy(np.ascontiguousarray(label).astype(np.float32))[None, None]
    out = F.interpolate(t, size=tuple(size), mode="nearest")[0, 0].numpy()
    return out.astype(label.dtype)
