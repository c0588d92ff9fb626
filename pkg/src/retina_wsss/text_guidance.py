"""Caption fusion into the last primary stage and label-text similarity maps."""
from __future__ import annotations

import torch
from torch import nn

from .errors import ConfigError, DimensionError

GUIDED_STAGES = (3, 4)


class DescriptionFusion(nn.Module):
    """Broadcast the caption vector over space, concatenate, project back to C_4."""

    def __init__(self, visual_dim: int, desc_dim: int):
        super().__init__()
        self.visual_dim = visual_dim
        self.desc_dim = desc_dim
        self.w_fuse = nn.Linear(visual_dim + desc_dim, visual_dim, bias=False)

    def forward(self, f4: torch.Tensor, desc: torch.Tensor) -> torch.Tensor:
        b, c, h, w = f4.shape
        if desc.dim() == 1:
            desc = desc.expand(b, -1)
        if c != self.visual_dim or desc.shape != (b, self.desc_dim):
            raise DimensionError(
                f"fusion expects ({b}, {self.visual_dim}, H, W) and ({b}, {self.desc_dim}); "
                f"got {tuple(f4.shape)} and {tuple(desc.shape)}")
        tokens = f4.flatten(2).transpose(1, 2)
        text = desc[:, None, :].expand(b, h * w, self.desc_dim)
        fused = self.w_fuse(torch.cat([tokens, text], dim=-1))
        return fused.transpose(1, 2).reshape(b, c, h, w)


class LabelAdaptor(nn.Module):
    """Bias-free two-layer MLP from label-text space to a stage's channels, plus its scale r_s."""

    def __init__(self, clip_dim: int, out_dim: int, hidden: int | None = None, r_init: float = 1.0):
        super().__init__()
        hidden = out_dim if hidden is None else hidden
        self.w1 = nn.Linear(clip_dim, hidden, bias=False)
        self.w2 = nn.Linear(hidden, out_dim, bias=False)
        self.r = nn.Parameter(torch.tensor(float(r_init)))

    def forward(self, label_matrix: torch.Tensor) -> torch.Tensor:
        """``(K, C_clip)`` -> ``(C_s, K)``."""
        return self.w2(torch.relu(self.w1(label_matrix))).transpose(0, 1)


class LabelGuidance(nn.Module):
    def __init__(self, clip_dim: int, channels, r_init: float = 1.0):
        super().__init__()
        self.adaptors = nn.ModuleDict(
            {str(s): LabelAdaptor(clip_dim, channels[s - 1], r_init=r_init) for s in GUIDED_STAGES})

    def adaptor(self, s: int) -> LabelAdaptor:
        if s not in GUIDED_STAGES:
            raise ConfigError(f"label guidance runs only at stages {GUIDED_STAGES}, not {s}")
        return self.adaptors[str(s)]

    def forward(self, s: int, f_primary, f_structural, label_matrix):
        ad = self.adaptor(s)
        return similarity_map(f_primary, f_structural, ad(label_matrix), ad.r)


def similarity_map(f_primary: torch.Tensor, f_structural: torch.Tensor, z_clip: torch.Tensor,
                   r) -> torch.Tensor:
    """``r * (F_P + F_T) @ Z_clip`` arranged as ``(B, K, H, W)``.

    ``z_clip`` is the adapted, transposed label matrix of shape ``(C_s, K)``.
    """
    if f_primary.shape != f_structural.shape:
        raise DimensionError(f"branch maps differ: {tuple(f_primary.shape)} vs {tuple(f_structural.shape)}")
    b, c, h, w = f_primary.shape
    if z_clip.shape[0] != c:
        raise DimensionError(f"label features have {z_clip.shape[0]} channels, visual maps {c}")
    z_visual = (f_primary + f_structural).flatten(2).transpose(1, 2)
    sim = r * (z_visual @ z_clip)
    return sim.transpose(1, 2).reshape(b, z_clip.shape[1], h, w)
