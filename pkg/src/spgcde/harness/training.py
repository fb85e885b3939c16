"""Seeded SGD training loop, sample preparation, checkpoints and manifests."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from ..datasets import CaseStore, ImageCase, augment_pair, augment_seed, default_class_names, resize_image, resize_labels
from ..errors import CheckpointMismatch, ConfigError, DataError, MissingPrior
from ..losses import combined_loss
from ..metrics import MetricReport
from ..network import ModelConfig, SPGCDENet, count_parameters
from ..prior_gate import mask_image
from .config import AblationConfig, RunConfig, TrainConfig, canonical_json, config_hash

log = logging.getLogger(__name__)

PriorFn = Callable[[ImageCase], np.ndarray]


# ---------------------------------------------------------------------------
# schedule

def lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.base_lr
    return cfg.base_lr * (1.0 - step / total) ** cfg.poly_power


def total_steps(cfg: TrainConfig, num_samples: int) -> int:
    if cfg.max_steps is not None:
        return cfg.max_steps
    return cfg.max_epochs * math.ceil(num_samples / cfg.batch_size)


# ---------------------------------------------------------------------------
# samples

@dataclass
class Sample:
    case_id: str
    image: np.ndarray  # network input size
    local: Optional[np.ndarray]
    label: np.ndarray


def prior_provider(source: str, prior_model=None) -> PriorFn:
    """Coarse class map for a case, from the chosen prior source."""
    if source == "files":
        def from_files(case: ImageCase) -> np.ndarray:
            if case.prior is None:
                raise MissingPrior(f"case {case.case_id!r} has no prior.u8")
            return case.prior
        return from_files
    if source == "ground-truth-oracle":
        return lambda case: case.label
    if source == "builtin-unet-like":
        if prior_model is None:
            raise ConfigError("prior_source 'builtin-unet-like' needs a trained prior model directory")
        from .priors import load_prior_segmenter
        seg = load_prior_segmenter(prior_model)
        return lambda case: seg.predict(case.image)
    raise ConfigError(f"unknown prior source {source!r}")


def prepare_sample(case: ImageCase, size, ablation: AblationConfig, prior_fn: Optional[PriorFn]) -> Sample:
    image = resize_image(case.image, size)
    label = resize_labels(case.label, size)
    local = None
    if ablation.use_prior:
        coarse = resize_labels(np.asarray(prior_fn(case), dtype=np.uint8), size)
        local = mask_image(image, coarse).pixels
    return Sample(case.case_id, image, local, label)


def collate(samples: Sequence[Sample], augment_seeds: Optional[Sequence[int]] = None, small_angle: bool = False):
    xs, ls, ys = [], [], []
    for i, s in enumerate(samples):
        x, xl, y = s.image, s.local, s.label
        if augment_seeds is not None:
            x, xl2, y = augment_pair(x, x if xl is None else xl, y, augment_seeds[i], small_angle)
            xl = None if s.local is None else xl2
        xs.append(x)
        ys.append(y)
        ls.append(xl)
    x = torch.from_numpy(np.stack(xs)[:, None].astype(np.float32))
    y = torch.from_numpy(np.stack(ys).astype(np.int64))
    xl = None if ls[0] is None else torch.from_numpy(np.stack(ls)[:, None].astype(np.float32))
    return x, xl, y


def stage2_forward(model: SPGCDENet, x: torch.Tensor, xl: Optional[torch.Tensor]) -> torch.Tensor:
    if model.local_encoder is not None:
        return model(x, xl)
    # single stream: consumes the gated image when a prior is in use
    return model(x if xl is None else xl)


# ---------------------------------------------------------------------------
# generic loop

@dataclass
class FitResult:
    steps: int
    epochs: int
    final_loss: float
    log: List[dict] = field(default_factory=list)


def fit(model: nn.Module, samples: Sequence[Sample], cfg: TrainConfig, forward,
        on_epoch: Optional[Callable[[int, int], dict]] = None) -> FitResult:
    """Momentum SGD over ``samples``; every random choice derives from ``cfg.seed``."""
    if not samples:
        raise DataError("training split is empty")
    opt = torch.optim.SGD(model.parameters(), lr=cfg.base_lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    weights = cfg.loss_weights
    total = total_steps(cfg, len(samples))
    n = len(samples)
    step, epoch, last = 0, 0, float("nan")
    records = []
    while step < total:
        epoch += 1
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        model.train()
        losses = []
        for start in range(0, n, cfg.batch_size):
            if step >= total:
                break
            idx = order[start:start + cfg.batch_size]
            seeds = [augment_seed(cfg.seed, epoch, int(k)) for k in idx] if cfg.augment else None
            x, xl, y = collate([samples[k] for k in idx], seeds, cfg.small_angle)
            lr = lr_at(cfg, step, total)
            for group in opt.param_groups:
                group["lr"] = lr
            loss = combined_loss(forward(model, x, xl), y, weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            last = float(loss.detach())
            losses.append(last)
            if not math.isfinite(last):
                raise FloatingPointError(f"loss diverged at step {step}")
        rec = {"epoch": epoch, "step": step, "loss": float(np.mean(losses)), "lr": lr_at(cfg, step - 1, total)}
        if on_epoch is not None:
            rec.update(on_epoch(epoch, step) or {})
            model.train()
        records.append(rec)
        log.info("epoch %d step %d loss %.4f%s", epoch, step, rec["loss"],
                 f" val_dsc {rec['val_dsc']:.4f}" if rec.get("val_dsc") is not None else "")
    return FitResult(step, epoch, last, records)


@torch.no_grad()
def recalibrate_bn(model: nn.Module, samples: Sequence[Sample], batch_size: int, forward) -> None:
    """Replace BN running statistics by exact training-set moments.

    Each BN layer's input is accumulated over un-augmented batches in train
    mode; running_var receives the biased variance that train-mode
    normalization itself uses.
    """
    layers = [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not layers or not samples:
        return
    sums = {id(m): [0, 0.0, 0.0] for m in layers}

    def hook(module, inputs):
        x = inputs[0].double().transpose(0, 1).flatten(1)
        acc = sums[id(module)]
        acc[0] += x.shape[1]
        acc[1] = acc[1] + x.sum(1)
        acc[2] = acc[2] + (x * x).sum(1)

    handles = [m.register_forward_pre_hook(hook) for m in layers]
    model.train()
    try:
        for start in range(0, len(samples), batch_size):
            x, xl, _ = collate(samples[start:start + batch_size])
            forward(model, x, xl)
    finally:
        for h in handles:
            h.remove()
    for m in layers:
        n, s1, s2 = sums[id(m)]
        mean = s1 / n
        m.running_mean.copy_(mean.to(m.running_mean.dtype))
        m.running_var.copy_((s2 / n - mean * mean).clamp_min(0).to(m.running_var.dtype))


# ---------------------------------------------------------------------------
# inference

@torch.no_grad()
def predict_logits(model: SPGCDENet, case: ImageCase, size, ablation: AblationConfig,
                   prior_fn: Optional[PriorFn]) -> torch.Tensor:
    """Logits resampled back to the case's own resolution, shape (C, H, W)."""
    model.eval()
    s = prepare_sample(case, size, ablation, prior_fn)
    x, xl, _ = collate([s])
    logits = stage2_forward(model, x, xl)
    if tuple(logits.shape[-2:]) != case.shape:
        logits = torch.nn.functional.interpolate(logits, size=case.shape, mode="bilinear", align_corners=False)
    return logits[0]


def logits_to_mask(logits: torch.Tensor) -> np.ndarray:
    if logits.shape[0] == 1:
        return (torch.sigmoid(logits[0]) > 0.5).numpy().astype(np.uint8)
    return logits.argmax(dim=0).numpy().astype(np.uint8)


def evaluate_cases(model: SPGCDENet, cases: Sequence[ImageCase], size, ablation: AblationConfig,
                   prior_fn: Optional[PriorFn], class_names: Sequence[str]) -> MetricReport:
    report = MetricReport(list(class_names))
    for case in cases:
        pred = logits_to_mask(predict_logits(model, case, size, ablation, prior_fn))
        report.add_case(case.case_id, pred, case.label, case.spacing)
    return report


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class CheckpointManifest:
    config_hash: str
    epoch: int
    step: int
    metric_snapshot: Optional[dict]
    checkpoints: Dict[str, str]
    best_epoch: int
    final_loss: float
    parameter_count: int

    def to_json(self) -> str:
        return canonical_json(asdict(self))

    @classmethod
    def load(cls, run_dir) -> "CheckpointManifest":
        path = Path(run_dir) / "manifest.json"
        if not path.is_file():
            raise CheckpointMismatch(f"{run_dir} has no manifest.json")
        return cls(**json.loads(path.read_text()))


def save_checkpoint(path: Path, model: nn.Module, chash: str, epoch: int, step: int) -> None:
    torch.save({"config_hash": chash, "epoch": epoch, "step": step, "state_dict": model.state_dict()}, path)


def build_model(run: RunConfig) -> SPGCDENet:
    a = run.ablation
    return SPGCDENet(run.model, use_local_encoder=a.use_local_encoder, fusion=a.fusion)


def load_run(run_dir, which: str = "best", expected_hash: Optional[str] = None):
    """Rebuild the model recorded in ``run_dir`` and restore one checkpoint.

    The checkpoint's stored hash must match the hash of the run's config
    (and ``expected_hash`` when given) before parameters are restored.
    """
    run_dir = Path(run_dir)
    if which not in ("best", "last"):
        raise ConfigError(f"checkpoint must be 'best' or 'last', got {which!r}")
    cfg_path, ckpt_path = run_dir / "config.json", run_dir / f"{which}.pt"
    if not cfg_path.is_file() or not ckpt_path.is_file():
        raise CheckpointMismatch(f"{run_dir} is missing config.json or {which}.pt")
    run = RunConfig.from_dict(json.loads(cfg_path.read_text()))
    chash = config_hash(run.model, run.ablation)
    ckpt = torch.load(ckpt_path, map_location="cpu", weights_only=True)
    if ckpt.get("config_hash") != chash:
        raise CheckpointMismatch(f"{ckpt_path} was written for config {str(ckpt.get('config_hash'))[:12]}, "
                                 f"run config is {chash[:12]}")
    if expected_hash is not None and expected_hash != chash:
        raise CheckpointMismatch(f"run config {chash[:12]} differs from the expected {expected_hash[:12]}")
    model = build_model(run)
    try:
        model.load_state_dict(ckpt["state_dict"])
    except RuntimeError as exc:
        raise CheckpointMismatch(str(exc)) from exc
    model.eval()
    return run, model


# ---------------------------------------------------------------------------
# stage-2 training

def dataset_classes(cases: Sequence[ImageCase]) -> int:
    return max(c.num_classes for c in cases)


def check_classes(model_cfg: ModelConfig, data_classes: int) -> None:
    ok = model_cfg.num_classes == data_classes or (model_cfg.num_classes == 1 and data_classes == 2)
    if not ok:
        raise ConfigError(f"model predicts {model_cfg.num_classes} classes, dataset has {data_classes}")


def class_names_for(store: CaseStore, data_classes: int) -> List[str]:
    names = store.class_names
    if names and len(names) == data_classes - 1:
        return names
    return default_class_names(data_classes)


def train(data_root, run: RunConfig, out_dir, prior_model=None) -> CheckpointManifest:
    """Train stage 2 and write config.json, last.pt, best.pt, train_log.jsonl, manifest.json."""
    store = CaseStore(data_root)
    train_cases = store.load_split("train")
    if not train_cases:
        raise DataError(f"{data_root} has no training cases")
    val_cases = store.load_split("val")
    data_classes = dataset_classes(train_cases)
    check_classes(run.model, data_classes)
    names = class_names_for(store, data_classes)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(run.to_json())
    chash = config_hash(run.model, run.ablation)

    tc, ab = run.train, run.ablation
    prior_fn = prior_provider(ab.prior_source, prior_model) if ab.use_prior else None
    samples = [prepare_sample(c, tc.input_size, ab, prior_fn) for c in train_cases]

    torch.manual_seed(tc.seed)
    model = build_model(run)
    total = total_steps(tc, len(samples))
    best = {"dsc": -1.0, "epoch": 0, "summary": None}

    def on_epoch(epoch: int, step: int) -> dict:
        if not val_cases or (epoch % tc.val_every and step < total):
            return {}
        if tc.bn_recalibrate:
            recalibrate_bn(model, samples, tc.batch_size, stage2_forward)
        report = evaluate_cases(model, val_cases, tc.input_size, ab, prior_fn, names)
        if report.mean_dsc > best["dsc"]:
            best.update(dsc=report.mean_dsc, epoch=epoch, summary=report.summary())
            save_checkpoint(out / "best.pt", model, chash, epoch, step)
        return {"val_dsc": report.mean_dsc}

    result = fit(model, samples, tc, stage2_forward, on_epoch)
    if tc.bn_recalibrate:
        recalibrate_bn(model, samples, tc.batch_size, stage2_forward)
    save_checkpoint(out / "last.pt", model, chash, result.epochs, result.steps)
    if best["summary"] is None:
        # no validation split: the last checkpoint is also the selected one
        (out / "best.pt").write_bytes((out / "last.pt").read_bytes())
        best["epoch"] = result.epochs
    with open(out / "train_log.jsonl", "w") as fh:
        for rec in result.log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    manifest = CheckpointManifest(
        config_hash=chash, epoch=result.epochs, step=result.steps, metric_snapshot=best["summary"],
        checkpoints={"best": "best.pt", "last": "last.pt"}, best_epoch=best["epoch"],
        final_loss=result.final_loss, parameter_count=count_parameters(model))
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest
