"""Run configuration: optimizer/schedule, ablation toggles, config hashing."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

from ..cross_attention import FUSION_KINDS
from ..errors import ConfigError
from ..losses import LossWeights
from ..network import ModelConfig

PRIOR_SOURCES = ("files", "builtin-unet-like", "ground-truth-oracle")
SCHEDULES = ("constant", "poly")


@dataclass
class TrainConfig:
    base_lr: float = 5e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 4
    max_epochs: int = 50
    max_steps: Optional[int] = None  # overrides max_epochs when set
    lr_schedule: str = "poly"
    poly_power: float = 0.9
    seed: int = 0
    input_size: Tuple[int, int] = (224, 224)
    augment: bool = True
    small_angle: bool = False
    val_every: int = 1  # epochs
    bn_recalibrate: bool = True  # exact train-set BN moments before each evaluation
    lambda1: float = 0.4  # dice weight
    lambda2: float = 0.6  # cross-entropy weight
    dice_smooth: float = 1e-6

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.lr_schedule not in SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {SCHEDULES}, got {self.lr_schedule!r}")
        positive = ["base_lr", "batch_size", "max_epochs", "poly_power", "val_every"]
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be non-negative")
        if self.max_steps is not None and self.max_steps <= 0:
            raise ConfigError("max_steps must be positive")
        if len(self.input_size) != 2 or min(self.input_size) <= 0:
            raise ConfigError(f"bad input_size {self.input_size}")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda1 + self.lambda2 <= 0:
            raise ConfigError("loss weights must be non-negative and not both zero")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.dice_smooth)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**_known(cls, d))


@dataclass
class AblationConfig:
    use_prior: bool = True
    use_local_encoder: bool = True
    fusion: str = "sca"
    prior_source: str = "files"

    def __post_init__(self):
        if self.fusion not in FUSION_KINDS:
            raise ConfigError(f"fusion must be one of {FUSION_KINDS}, got {self.fusion!r}")
        if self.prior_source not in PRIOR_SOURCES:
            raise ConfigError(f"prior_source must be one of {PRIOR_SOURCES}, got {self.prior_source!r}")
        if self.use_local_encoder and not self.use_prior:
            raise ConfigError("use_local_encoder requires use_prior")
        if self.fusion != "none" and not self.use_local_encoder:
            raise ConfigError("a fusion kind other than 'none' requires use_local_encoder")

    @classmethod
    def preset(cls, name: str, **overrides) -> "AblationConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        d = dict(PRESETS[name])
        d.update(overrides)
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AblationConfig":
        return cls(**_known(cls, d))


PRESETS: Dict[str, dict] = {
    "model1": dict(use_prior=False, use_local_encoder=False, fusion="none"),
    "model2": dict(use_prior=True, use_local_encoder=True, fusion="none"),
    "full": dict(use_prior=True, use_local_encoder=True, fusion="sca"),
    # fusion-type grid, in reporting order
    "fusion-none": dict(use_prior=True, use_local_encoder=True, fusion="none"),
    "fusion-concat": dict(use_prior=True, use_local_encoder=True, fusion="concat"),
    "fusion-cross_attention": dict(use_prior=True, use_local_encoder=True, fusion="cross_attention"),
    "fusion-sca": dict(use_prior=True, use_local_encoder=True, fusion="sca"),
}
PRESET_GROUPS = {
    "components": ["model1", "model2", "full"],
    "fusion": ["fusion-none", "fusion-concat", "fusion-cross_attention", "fusion-sca"],
}


def expand_presets(names: List[str]) -> List[str]:
    out: List[str] = []
    for n in names:
        out.extend(PRESET_GROUPS.get(n, [n]))
    for n in out:
        if n not in PRESETS:
            raise ConfigError(f"unknown preset {n!r}")
    return out


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "ablation": self.ablation.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"model", "train", "ablation"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        return cls(ModelConfig.from_dict(d.get("model", {})),
                   TrainConfig.from_dict(d.get("train", {})),
                   AblationConfig.from_dict(d.get("ablation", {})))

    def to_json(self) -> str:
        return canonical_json(self.to_dict())


def _known(cls, d: dict) -> dict:
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    return dict(d)


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def config_hash(model: ModelConfig, ablation: AblationConfig) -> str:
    """Identity of the parameter layout and the stage-2 input semantics.

    The prior source is left out on purpose: swapping priors at evaluation
    time must not invalidate a trained stage-2 checkpoint.
    """
    key = {
        "model": model.to_dict(),
        "use_prior": ablation.use_prior,
        "use_local_encoder": ablation.use_local_encoder,
        "fusion": ablation.fusion,
    }
    blob = json.dumps(key, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
