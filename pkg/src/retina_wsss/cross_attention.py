"""Cross-branch feature exchange after encoder stages 2 and 3.

For the target branch, queries come from the *other* branch while keys and
values come from the target itself; the result is added back onto the target
features inside a pre-norm transformer block.
"""
from __future__ import annotations

import torch
from torch import nn

from .encoder import Mlp
from .errors import ConfigError, DimensionError

EXCHANGE_STAGES = (2, 3)


def to_tokens(x: torch.Tensor) -> torch.Tensor:
    return x.flatten(2).transpose(1, 2)


def to_map(tokens: torch.Tensor, hw) -> torch.Tensor:
    b, n, c = tokens.shape
    return tokens.transpose(1, 2).reshape(b, c, *hw)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if heads < 1 or dim % heads:
            raise ConfigError(f"{dim} channels not divisible by {heads} heads")
        self.heads = heads
        self.dim = dim
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.proj = nn.Linear(dim, dim)

    def forward(self, query_src: torch.Tensor, kv_src: torch.Tensor, return_affinity: bool = False):
        """Token inputs ``(B, N, C)``; returns ``(B, N, C)`` (and the affinity ``(B, h, N, N)``)."""
        if query_src.shape != kv_src.shape:
            raise DimensionError(f"cross-attention inputs differ: {tuple(query_src.shape)} vs {tuple(kv_src.shape)}")
        b, n, c = query_src.shape
        d = c // self.heads
        q = self.w_q(query_src).reshape(b, n, self.heads, d).transpose(1, 2)
        k = self.w_k(kv_src).reshape(b, n, self.heads, d).transpose(1, 2)
        v = self.w_v(kv_src).reshape(b, n, self.heads, d).transpose(1, 2)
        affinity = torch.softmax(q @ k.transpose(-2, -1) / (c / self.heads) ** 0.5, dim=-1)
        z = (affinity @ v).transpose(1, 2).reshape(b, n, c)
        z = self.proj(z)
        return (z, affinity) if return_affinity else z


class CrossAttentionBlock(nn.Module):
    """norm -> cross-attention -> residual -> norm -> MLP -> residual, residual on the target."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = CrossAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, target: torch.Tensor, other: torch.Tensor) -> torch.Tensor:
        """Channels-first maps ``(B, C, H, W)`` in and out."""
        if target.shape != other.shape:
            raise DimensionError(f"branch maps differ: {tuple(target.shape)} vs {tuple(other.shape)}")
        hw = target.shape[-2:]
        t, o = to_tokens(target), to_tokens(other)
        z = t + self.attn(self.norm_q(o), self.norm_kv(t))
        z = z + self.mlp(self.norm2(z))
        return to_map(z, hw)


class FeatureExchange(nn.Module):
    """Independent primary- and structural-direction blocks for each exchange stage."""

    def __init__(self, channels, heads, mlp_ratio: float = 4.0):
        super().__init__()
        self.blocks = nn.ModuleDict()
        for s in EXCHANGE_STAGES:
            c, h = channels[s - 1], heads[s - 1]
            self.blocks[str(s)] = nn.ModuleDict({
                "primary": CrossAttentionBlock(c, h, mlp_ratio),
                "structural": CrossAttentionBlock(c, h, mlp_ratio),
            })

    def forward(self, s: int, f_primary: torch.Tensor, f_structural: torch.Tensor):
        if s not in EXCHANGE_STAGES:
            raise ConfigError(f"feature exchange runs only at stages {EXCHANGE_STAGES}, not {s}")
        pair = self.blocks[str(s)]
        z_p = pair["primary"](f_primary, f_structural)
        z_t = pair["structural"](f_structural, f_primary)
        return z_p, z_t
