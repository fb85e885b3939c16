"""Assembly of the crossing dual-encoder network."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn

from .cross_attention import FUSION_KINDS, make_fusion, validate_levels
from .encoders import DEFAULT_BLOCKS, Encoder, FeatureRefine, check_geometry, level_specs, scaled
from .errors import BadConfig, ShapeMismatch
from .flow_decoder import FlowDecoder, FlowSpec, OutputHead, decoder_channels


@dataclass
class ModelConfig:
    num_classes: int = 9
    in_channels: int = 1
    width: int = 1
    blocks: Tuple[int, ...] = DEFAULT_BLOCKS
    global_channels: int = 512
    sca_levels: Tuple[int, ...] = (2, 3, 4)
    heads: int = 4
    activation: str = "auto"
    head_channels: int = 64  # not scaled by width

    def __post_init__(self):
        self.blocks = tuple(int(b) for b in self.blocks)
        self.sca_levels = tuple(sorted(int(i) for i in self.sca_levels))
        if self.num_classes < 1:
            raise BadConfig("num_classes must be >= 1")
        channels = [s.out_channels for s in level_specs(self.width)]
        scaled(self.global_channels, self.width)
        validate_levels(self.sca_levels, channels, self.heads)

    @property
    def flow_spec(self) -> FlowSpec:
        return FlowSpec.for_width(self.width)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = list(self.blocks)
        d["sca_levels"] = list(self.sca_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class SPGCDENet(nn.Module):
    """Global encoder, optional local encoder, per-level fusion, FR, flow decoder, head.

    With ``use_local_encoder=False`` a single encoder feeds FR directly
    (the single-stream baseline). ``fusion`` selects the cross-stream
    interaction applied after each configured level.
    """

    def __init__(self, cfg: ModelConfig, use_local_encoder: bool = True, fusion: str = "sca"):
        super().__init__()
        if fusion not in FUSION_KINDS:
            raise BadConfig(f"unknown fusion kind {fusion!r}")
        if fusion != "none" and not use_local_encoder:
            raise BadConfig("fusion requires the local encoder")
        self.cfg = cfg
        self.use_local_encoder = use_local_encoder
        self.fusion_kind = fusion
        w = cfg.width

        self.global_encoder = Encoder(cfg.in_channels, w, cfg.blocks)
        self.local_encoder = Encoder(cfg.in_channels, w, cfg.blocks) if use_local_encoder else None
        ch = self.global_encoder.channels

        self.fusion = nn.ModuleDict()
        if fusion != "none":
            for i in cfg.sca_levels:
                self.fusion[str(i)] = make_fusion(fusion, ch[i], cfg.heads)

        streams = 2 if use_local_encoder else 1
        g_ch = scaled(cfg.global_channels, w)
        self.refine = FeatureRefine(streams * ch[5], scaled(1024, w), g_ch)
        dec_ch = decoder_channels(w)
        self.decoder = FlowDecoder(g_ch, ch[:5], dec_ch, cfg.flow_spec)
        self.head = OutputHead(dec_ch[-1], cfg.num_classes, cfg.activation, cfg.head_channels)

    def encode_streams(self, x: torch.Tensor, x_local: Optional[torch.Tensor]) -> Tuple[List[torch.Tensor], Optional[List[torch.Tensor]]]:
        """Run both encoders level by level, fusing after every configured level.

        Returned pyramids hold the post-fusion features, which are what the
        next stage and the decoder skips consume.
        """
        check_geometry(x.shape[-2], x.shape[-1])
        if self.local_encoder is None:
            return self.global_encoder(x), None
        if x_local is None:
            raise BadConfig("dual-encoder model needs the local image")
        if x_local.shape != x.shape:
            raise ShapeMismatch(f"local image {tuple(x_local.shape)} vs image {tuple(x.shape)}")
        ge_levels, le_levels = [], []
        ge, le = x, x_local
        for i in range(6):
            ge = self.global_encoder.stage(i, ge)
            le = self.local_encoder.stage(i, le)
            key = str(i)
            if key in self.fusion:
                ge, le = self.fusion[key](ge, le)
            ge_levels.append(ge)
            le_levels.append(le)
        return ge_levels, le_levels

    def forward_features(self, x: torch.Tensor, x_local: Optional[torch.Tensor] = None) -> Dict[str, object]:
        ge, le = self.encode_streams(x, x_local)
        g = self.refine(ge[5], le[5]) if le is not None else self.refine(ge[5])
        flows = self.decoder.flow_maps(g)
        dec = self.decoder.decode(g, ge[:5], flows)
        logits = self.head(dec[-1])
        return {"global": ge, "local": le, "context": g, "flows": flows,
                "decoder": dec, "logits": logits}

    def forward(self, x: torch.Tensor, x_local: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.forward_features(x, x_local)["logits"]

    def probabilities(self, logits: torch.Tensor) -> torch.Tensor:
        return self.head.probabilities(logits)

    def predict_mask(self, x: torch.Tensor, x_local: Optional[torch.Tensor] = None) -> torch.Tensor:
        logits = self(x, x_local)
        if logits.shape[1] == 1:
            return (torch.sigmoid(logits[:, 0]) > 0.5).long()
        return logits.argmax(dim=1)

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        """Named module groups used by the no-dead-module checks."""
        groups: Dict[str, List[nn.Parameter]] = {}
        for name, p in self.named_parameters():
            parts = name.split(".")
            if parts[0] in ("global_encoder", "local_encoder"):
                key = f"{parts[0]}.level{parts[2]}"
            elif parts[0] == "fusion":
                key = f"fusion.level{parts[1]}.{parts[2]}"
            elif parts[0] == "decoder":
                key = f"decoder.{parts[1]}{parts[2]}"
            else:
                key = parts[0]
            groups.setdefault(key, []).append(p)
        return groups


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
