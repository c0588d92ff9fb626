"""The dual-branch network: both encoders, feature exchange, text guidance and heads."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import nn

from .cross_attention import EXCHANGE_STAGES, FeatureExchange
from .encoder import EncoderConfig, MiTEncoder, freeze, init_weights
from .errors import DimensionError
from .objectives import gmp
from .text_guidance import DescriptionFusion, LabelGuidance


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    num_classes: int = 3
    clip_dim: int = 768
    desc_dim: int = 512
    structural_frozen: Optional[tuple] = None  # None: same groups as the primary branch
    exchange_mlp_ratio: float = 4.0
    r_init: float = 1.0

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "num_classes": self.num_classes,
            "clip_dim": self.clip_dim,
            "desc_dim": self.desc_dim,
            "structural_frozen": None if self.structural_frozen is None else list(self.structural_frozen),
            "exchange_mlp_ratio": self.exchange_mlp_ratio,
            "r_init": self.r_init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        enc = d.pop("encoder", {})
        enc = EncoderConfig(**enc) if isinstance(enc, dict) else enc
        if d.get("structural_frozen") is not None:
            d["structural_frozen"] = tuple(str(s) for s in d["structural_frozen"])
        return cls(encoder=enc, **d)


class DualBranchNet(nn.Module):
    def __init__(self, config: ModelConfig, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.config = config
        enc = config.encoder
        self.primary = MiTEncoder(enc)
        self.structural = MiTEncoder(enc)
        self.exchange = FeatureExchange(enc.channels, enc.heads, config.exchange_mlp_ratio)
        self.fusion = DescriptionFusion(enc.channels[3], config.desc_dim)
        self.guidance = LabelGuidance(config.clip_dim, enc.channels, config.r_init)
        self.head_primary = nn.Linear(enc.channels[3], config.num_classes, bias=False)
        self.head_structural = nn.Linear(enc.channels[3], 2, bias=False)
        init_weights(self, generator)
        self.apply_freeze()

    def apply_freeze(self):
        freeze(self.primary, self.config.encoder.frozen_stages)
        spec = self.config.structural_frozen
        freeze(self.structural, self.config.encoder.frozen_stages if spec is None else spec)

    @staticmethod
    def _as_rgb(x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x[:, None]
        if x.shape[1] == 1:
            x = x.expand(-1, 3, -1, -1)
        return x

    def forward(self, image: torch.Tensor, structural: torch.Tensor, desc: torch.Tensor,
                label_matrix: torch.Tensor) -> dict:
        """Run both branches stage by stage.

        ``image`` and ``structural`` are ``(B, H, W)`` or ``(B, 1|3, H, W)``;
        single-channel inputs are replicated to three channels.
        """
        p, t = self._as_rgb(image), self._as_rgb(structural)
        if p.shape != t.shape:
            raise DimensionError(f"image {tuple(p.shape)} and structural input {tuple(t.shape)} differ")
        self.primary.check_input(p)
        feats_p, feats_t = [], []
        for s in range(1, 5):
            p = self.primary.forward_stage(s, p)
            t = self.structural.forward_stage(s, t)
            if s in EXCHANGE_STAGES:
                p, t = self.exchange(s, p, t)
            feats_p.append(p)
            feats_t.append(t)

        f4_plus = self.fusion(feats_p[3], desc)
        sim3 = self.guidance(3, feats_p[2], feats_t[2], label_matrix)
        sim4 = self.guidance(4, f4_plus, feats_t[3], label_matrix)
        return {
            "primary": feats_p,
            "structural": feats_t,
            "f4_plus": f4_plus,
            "sim3": sim3,
            "sim4": sim4,
            "y1": gmp(f4_plus) @ self.head_primary.weight.t(),
            "y2": gmp(feats_t[3]) @ self.head_structural.weight.t(),
            "y3": gmp(sim3),
            "y4": gmp(sim4),
        }
