"""Hierarchical four-stage transformer encoder (MiT-style).

Every stage is a non-overlapping strided patch merge followed by a stack of
pre-norm transformer blocks with spatially reduced self-attention. Feature
maps are returned channels-first, ``(B, C_s, H_s, W_s)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Union

import torch
from torch import nn

from .errors import ConfigError, DimensionError

STRIDES = (4, 2, 2, 2)
GROUPS = ("proj", "1", "2", "3", "4")


@dataclass
class EncoderConfig:
    channels: tuple = (64, 128, 320, 512)
    depths: tuple = (3, 4, 6, 3)
    heads: tuple = (1, 2, 5, 8)
    sr_ratios: tuple = (8, 4, 2, 1)
    mlp_ratio: float = 4.0
    in_chans: int = 3
    frozen_stages: tuple = ("proj", "1", "2")

    def __post_init__(self):
        for name in ("channels", "depths", "heads", "sr_ratios"):
            value = tuple(int(v) for v in getattr(self, name))
            if len(value) != 4:
                raise ConfigError(f"encoder {name} needs 4 entries, got {len(value)}")
            setattr(self, name, value)
        self.frozen_stages = tuple(str(s) for s in self.frozen_stages)
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigError(f"stage channels must be strictly increasing: {self.channels}")
        for c, h in zip(self.channels, self.heads):
            if h < 1 or c % h:
                raise ConfigError(f"{c} channels not divisible by {h} heads")
        if any(d < 0 for d in self.depths) or any(r < 1 for r in self.sr_ratios):
            raise ConfigError("depths must be >= 0 and reduction ratios >= 1")
        bad = set(self.frozen_stages) - set(GROUPS)
        if bad:
            raise ConfigError(f"unknown frozen stage(s) {sorted(bad)}; choose from {GROUPS}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "EncoderConfig":
        try:
            base = dict(PRESETS[name])
        except KeyError:
            raise ConfigError(f"unknown encoder preset {name!r}; known: {sorted(PRESETS)}") from None
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def stage_shape(self, s: int, height: int, width: int) -> tuple[int, int, int]:
        f = 4 * 2 ** (s - 1)
        return self.channels[s - 1], height // f, width // f


PRESETS = {
    "mit_b1": dict(channels=(64, 128, 320, 512), depths=(2, 2, 2, 2), heads=(1, 2, 5, 8), sr_ratios=(8, 4, 2, 1)),
    "mit_b2": dict(channels=(64, 128, 320, 512), depths=(3, 4, 6, 3), heads=(1, 2, 5, 8), sr_ratios=(8, 4, 2, 1)),
    "mit_b5": dict(channels=(64, 128, 320, 512), depths=(3, 6, 40, 3), heads=(1, 2, 5, 8), sr_ratios=(8, 4, 2, 1)),
    "toy": dict(channels=(16, 32, 64, 128), depths=(1, 1, 1, 1), heads=(1, 2, 4, 4), sr_ratios=(4, 2, 1, 1),
                frozen_stages=()),
    "tiny": dict(channels=(4, 8, 16, 32), depths=(1, 1, 1, 1), heads=(1, 2, 2, 4), sr_ratios=(1, 1, 1, 1),
                 frozen_stages=()),
}


def init_weights(module: nn.Module, generator: Optional[torch.Generator] = None, std: float = 0.02) -> None:
    """Truncated-normal weights (cut at 2 std), zero biases, unit norms."""
    for m in module.modules():
        if isinstance(m, (nn.Linear, nn.Conv2d)):
            with torch.no_grad():
                nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.LayerNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SpatialReductionAttention(nn.Module):
    """Multi-head self-attention whose keys/values come from a strided-down map."""

    def __init__(self, dim, heads, sr_ratio=1):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.sr_ratio = sr_ratio
        if sr_ratio > 1:
            self.sr = nn.Conv2d(dim, dim, kernel_size=sr_ratio, stride=sr_ratio)
            self.sr_norm = nn.LayerNorm(dim)

    def forward(self, x, hw):
        b, n, c = x.shape
        d = c // self.heads
        q = self.q(x).reshape(b, n, self.heads, d).transpose(1, 2)
        src = x
        if self.sr_ratio > 1 and min(hw) >= self.sr_ratio:
            grid = x.transpose(1, 2).reshape(b, c, *hw)
            src = self.sr_norm(self.sr(grid).flatten(2).transpose(1, 2))
        kv = self.kv(src).reshape(b, src.shape[1], 2, self.heads, d).permute(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim, heads, sr_ratio, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SpatialReductionAttention(dim, heads, sr_ratio)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x, hw):
        x = x + self.attn(self.norm1(x), hw)
        return x + self.mlp(self.norm2(x))


class PatchMerge(nn.Module):
    """Linear map over non-overlapping p x p neighborhoods, then LayerNorm."""

    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, out_ch, kernel_size=stride, stride=stride)
        self.norm = nn.LayerNorm(out_ch)

    def forward(self, x):
        x = self.proj(x)
        hw = x.shape[-2:]
        return self.norm(x.flatten(2).transpose(1, 2)), (int(hw[0]), int(hw[1]))


class Stage(nn.Module):
    def __init__(self, in_ch, dim, stride, depth, heads, sr_ratio, mlp_ratio):
        super().__init__()
        self.patch = PatchMerge(in_ch, dim, stride)
        self.blocks = nn.ModuleList(Block(dim, heads, sr_ratio, mlp_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        tokens, hw = self.patch(x)
        for blk in self.blocks:
            tokens = blk(tokens, hw)
        tokens = self.norm(tokens)
        b, n, c = tokens.shape
        return tokens.transpose(1, 2).reshape(b, c, *hw)


Injection = Union[Mapping[int, torch.Tensor], Callable[[int, torch.Tensor], torch.Tensor], None]


class MiTEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        chans = (config.in_chans,) + tuple(config.channels)
        self.stages = nn.ModuleList(
            Stage(chans[i], chans[i + 1], STRIDES[i], config.depths[i], config.heads[i],
                  config.sr_ratios[i], config.mlp_ratio)
            for i in range(4)
        )

    def check_input(self, x: torch.Tensor) -> None:
        if x.dim() != 4 or x.shape[1] != self.config.in_chans:
            raise DimensionError(f"expected (B, {self.config.in_chans}, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise DimensionError(f"input size {h}x{w} is not divisible by 32")

    def forward_stage(self, s: int, x: torch.Tensor) -> torch.Tensor:
        return self.stages[s - 1](x)

    def forward(self, x: torch.Tensor, injected: Injection = None) -> list[torch.Tensor]:
        """Return the four stage maps.

        ``injected`` (a stage -> tensor mapping, or a ``hook(stage, feat)``
        callable) replaces a stage's output before it feeds the next stage;
        the replacement is what the pyramid reports for that stage.
        """
        self.check_input(x)
        pyramid = []
        feat = x
        for s in range(1, 5):
            feat = self.forward_stage(s, feat)
            if callable(injected):
                feat = injected(s, feat)
            elif injected is not None and s in injected:
                if injected[s].shape != feat.shape:
                    raise DimensionError(
                        f"injected stage-{s} map {tuple(injected[s].shape)} != {tuple(feat.shape)}")
                feat = injected[s]
            pyramid.append(feat)
        return pyramid

    def param_groups(self) -> dict[str, list[tuple[str, nn.Parameter]]]:
        """Parameters keyed by freeze group: 'proj' is the stage-1 patch embedding."""
        groups = {g: [] for g in GROUPS}
        for name, p in self.named_parameters():
            s = int(name.split(".")[1]) + 1
            group = "proj" if s == 1 and name.startswith("stages.0.patch.") else str(s)
            groups[group].append((name, p))
        return groups


def freeze(encoder: MiTEncoder, spec: Iterable[str]) -> None:
    """Mark the given groups non-trainable and every other group trainable."""
    spec = {str(s) for s in spec}
    bad = spec - set(GROUPS)
    if bad:
        raise ConfigError(f"unknown freeze group(s) {sorted(bad)}")
    for group, params in encoder.param_groups().items():
        for _, p in params:
            p.requires_grad_(group not in spec)
