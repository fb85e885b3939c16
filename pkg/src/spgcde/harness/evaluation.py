"""Checkpoint evaluation and single-image prediction."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from ..datasets import CaseStore, ImageCase
from ..errors import DataError, MissingPrior, ShapeMismatch
from ..metrics import MetricReport
from .config import AblationConfig
from .training import class_names_for, check_classes, evaluate_cases, load_run, logits_to_mask, predict_logits, prior_provider


def _ablation_for(run, prior_source: Optional[str]) -> AblationConfig:
    if prior_source is None:
        return run.ablation
    d = run.ablation.to_dict()
    d["prior_source"] = prior_source
    return AblationConfig.from_dict(d)


def evaluate(data_root, run_dir, split: str = "test", prior_source: Optional[str] = None,
             which: str = "best", prior_model=None) -> MetricReport:
    """Per-case metrics of one checkpoint; ``prior_source`` swaps stage 1 without retraining."""
    run, model = load_run(run_dir, which)
    store = CaseStore(data_root)
    cases = store.load_split(split)
    if not cases:
        raise DataError(f"{data_root} has no {split!r} cases")
    data_classes = max(c.num_classes for c in cases)
    check_classes(run.model, data_classes)
    ab = _ablation_for(run, prior_source)
    prior_fn = prior_provider(ab.prior_source, prior_model) if ab.use_prior else None
    return evaluate_cases(model, cases, run.train.input_size, ab, prior_fn, class_names_for(store, data_classes))


def write_report(report: MetricReport, path, row_name: str = "model") -> str:
    """Write JSON to ``path`` and a text table next to it; returns the table."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json() + "\n")
    table = report.table(row_name)
    path.with_suffix(".txt").write_text(table + "\n")
    return table


# ---------------------------------------------------------------------------
# prediction

@dataclass
class PredictionBundle:
    probabilities: np.ndarray  # (C, H, W)
    mask: np.ndarray  # (H, W) uint8
    config_hash: str
    checkpoint_id: str


def _read_u8(path: Path, shape) -> np.ndarray:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != shape[0] * shape[1]:
        raise ShapeMismatch(f"{path} has {raw.size} pixels, image is {shape[0]}x{shape[1]}")
    return raw.reshape(shape)


def read_image_file(image_path) -> ImageCase:
    """An ``image.f32`` (or its case directory) in store layout, with its meta.json."""
    p = Path(image_path)
    case_dir = p if p.is_dir() else p.parent
    image_file = case_dir / "image.f32" if p.is_dir() else p
    meta_path = case_dir / "meta.json"
    if not meta_path.is_file() or not image_file.is_file():
        raise DataError(f"{image_path} is not an image in store layout")
    meta = json.loads(meta_path.read_text())
    h, w = int(meta["height"]), int(meta["width"])
    raw = np.fromfile(image_file, dtype="<f4")
    if raw.size != h * w:
        raise ShapeMismatch(f"{image_file} has {raw.size} values, meta says {h}x{w}")
    image = np.clip(np.nan_to_num(raw.reshape(h, w)), 0.0, 1.0)
    label_path = case_dir / "label.u8"
    label = _read_u8(label_path, (h, w)) if label_path.is_file() else np.zeros((h, w), np.uint8)
    return ImageCase(case_dir.name, image, label, tuple(meta.get("spacing", (1.0, 1.0))),
                     meta.get("split", "test"), int(meta.get("num_classes", int(label.max()) + 1)))


def predict(image_path, run_dir, prior_path=None, out_dir=None, overlay: bool = False,
            which: str = "best", prior_source: Optional[str] = None, prior_model=None) -> PredictionBundle:
    """Segment one stored image; writes ``pred.u8`` (and ``overlay.png``) into ``out_dir``."""
    run, model = load_run(run_dir, which)
    case = read_image_file(image_path)
    ab = _ablation_for(run, prior_source)
    prior_fn = None
    if ab.use_prior:
        case_dir = Path(image_path) if Path(image_path).is_dir() else Path(image_path).parent
        if ab.prior_source == "files":
            p = Path(prior_path) if prior_path else case_dir / "prior.u8"
            if not p.is_file():
                raise MissingPrior(f"no prior map at {p}")
            coarse = _read_u8(p, case.shape)
            prior_fn = lambda c: coarse
        elif ab.prior_source == "ground-truth-oracle" and not (case_dir / "label.u8").is_file():
            raise MissingPrior(f"oracle prior needs {case_dir / 'label.u8'}")
        else:
            prior_fn = prior_provider(ab.prior_source, prior_model)
    logits = predict_logits(model, case, run.train.input_size, ab, prior_fn)
    probs = model.probabilities(logits[None])[0].numpy()
    mask = logits_to_mask(logits)
    ckpt = Path(run_dir) / f"{which}.pt"
    bundle = PredictionBundle(probs, mask, torch.load(ckpt, map_location="cpu", weights_only=True)["config_hash"],
                              hashlib.sha256(ckpt.read_bytes()).hexdigest()[:16])
    out = Path(out_dir) if out_dir else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    mask.tofile(out / "pred.u8")
    if overlay:
        write_overlay(case.image, mask, out / "overlay.png")
    return bundle


PALETTE = np.array([
    [0, 0, 0], [230, 25, 75], [60, 180, 75], [255, 225, 25], [0, 130, 200], [245, 130, 48],
    [145, 30, 180], [70, 240, 240], [240, 50, 230], [210, 245, 60],
], dtype=np.float32)


def write_overlay(image: np.ndarray, mask: np.ndarray, path, alpha: float = 0.45) -> None:
    from PIL import Image

    grey = np.repeat((np.clip(image, 0, 1) * 255.0)[..., None], 3, axis=2)
    colors = PALETTE[mask % len(PALETTE)]
    blend = np.where(mask[..., None] > 0, (1 - alpha) * grey + alpha * colors, grey)
    Image.fromarray(blend.round().astype(np.uint8)).save(path)
