"""Classification heads and the four-term image-level loss."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError

TERMS = ("L1", "L2", "L3", "L4")


@dataclass(frozen=True)
class LossWeights:
    l1: float = 1.0
    l2: float = 1.0
    l3: float = 1.0
    l4: float = 1.0

    def __post_init__(self):
        vals = self.as_tuple()
        if any(v < 0 for v in vals):
            raise ConfigError(f"loss weights must be nonnegative, got {vals}")
        if not any(vals):
            raise ConfigError("at least one loss weight must be positive")

    def as_tuple(self):
        return (self.l1, self.l2, self.l3, self.l4)

    @classmethod
    def of(cls, values) -> "LossWeights":
        if isinstance(values, LossWeights):
            return values
        if isinstance(values, dict):
            return cls(**{k: float(v) for k, v in values.items()})
        return cls(*(float(v) for v in values))


def gmp(x: torch.Tensor) -> torch.Tensor:
    """Global max pool over the trailing two axes, ``(..., C, H, W) -> (..., C)``.

    The gradient reaches only the first maximum in row-major order.
    """
    flat = x.flatten(-2)
    idx = flat.argmax(dim=-1, keepdim=True)
    return flat.gather(-1, idx).squeeze(-1)


def classify(feature_map: torch.Tensor, head_weight: torch.Tensor) -> torch.Tensor:
    """``GMP(F) @ W``; ``head_weight`` is stored as ``(K, C)`` like ``nn.Linear``."""
    return gmp(feature_map) @ head_weight.t()


def loss_multilabel(logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean sigmoid cross-entropy over classes (and batch)."""
    return F.binary_cross_entropy_with_logits(logits, y.to(logits.dtype), reduction="mean")


def loss_binary(logits: torch.Tensor, y_b: torch.Tensor) -> torch.Tensor:
    """Two-way softmax cross-entropy against a one-hot healthy/lesion target."""
    logp = torch.log_softmax(logits, dim=-1)
    return -(y_b.to(logits.dtype) * logp).sum(dim=-1).mean()


def total_loss(outputs: dict, y: torch.Tensor, y_b: torch.Tensor, weights: LossWeights):
    """Weighted sum of the four terms.

    The terms are combined in float64 so that the logged total equals the
    weighted sum of the logged terms to double precision.
    """
    terms = {
        "L1": loss_multilabel(outputs["y1"], y),
        "L2": loss_binary(outputs["y2"], y_b),
        "L3": loss_multilabel(outputs["y3"], y),
        "L4": loss_multilabel(outputs["y4"], y),
    }
    total = sum(w * terms[t].double() for w, t in zip(weights.as_tuple(), TERMS))
    return total, terms
