"""Residual fusion of the change-signal branch with context branches.

Each block keeps a linear projection of the S1-post feature as its identity
path and adds a processed context path on top. The last batch-norm of the
context path starts with a zero scale, so at initialization a block is
exactly ``ReLU(projected main)`` and the context branches can only add to it
once training moves that scale away from zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core_types import FeaturePyramid, Variant

FUSION_PLANS = {
    Variant.LARGE: ((8, 4, 2), (512, 256, 128)),
    Variant.SMALL: ((4, 2), (384, 128)),
}


@dataclass
class FusionConfig:
    variant: Variant = Variant.LARGE
    scales: Tuple[int, ...] = ()
    channels_per_scale: Dict[int, int] = field(default_factory=dict)
    context_reduction: int = 4

    def __post_init__(self):
        self.variant = Variant(self.variant)
        plan_scales, plan_channels = FUSION_PLANS[self.variant]
        if not self.scales:
            self.scales = plan_scales
        self.scales = tuple(int(s) for s in self.scales)
        if not self.channels_per_scale:
            self.channels_per_scale = dict(zip(plan_scales, plan_channels))
        self.channels_per_scale = {int(k): int(v) for k, v in self.channels_per_scale.items()}
        if list(self.scales) != sorted(self.scales, reverse=True):
            raise ValueError("fusion scales must run coarse to fine")
        missing = [s for s in self.scales if s not in self.channels_per_scale]
        if missing:
            raise ValueError(f"no channel count for fusion scales {missing}")

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "scales": list(self.scales),
            "channels_per_scale": {str(k): v for k, v in self.channels_per_scale.items()},
            "context_reduction": self.context_reduction,
        }


class ResidualFusionBlock(nn.Module):
    """``ReLU(proj(main) + BN(conv3x3(ReLU(BN(conv1x1(concat(context, carry)))))))``."""

    def __init__(self, main_channels: int, context_channels: Sequence[int], out_channels: int,
                 carry_channels: int = 0, context_reduction: int = 4):
        super().__init__()
        self.identity = nn.Conv2d(main_channels, out_channels, 1)
        cin = sum(context_channels) + carry_channels
        mid = max(8, out_channels // context_reduction)
        self.context_in = nn.Conv2d(cin, mid, 1, bias=False)
        self.context_bn1 = nn.BatchNorm2d(mid)
        self.context_conv = nn.Conv2d(mid, out_channels, 3, padding=1, bias=False)
        self.context_bn2 = nn.BatchNorm2d(out_channels)
        nn.init.zeros_(self.context_bn2.weight)
        self.has_carry = carry_channels > 0
        self.out_channels = out_channels

    def forward(self, main, context: List[torch.Tensor], carry: Optional[torch.Tensor] = None):
        h, w = main.shape[-2:]
        inputs = list(context) + ([carry] if carry is not None else [])
        for t in inputs:
            if t.shape[-2:] != (h, w):
                raise ValueError(f"fusion input spatial {tuple(t.shape[-2:])} != main {(h, w)}")
        if (carry is not None) != self.has_carry:
            raise ValueError("carry presence does not match block configuration")
        identity = self.identity(main)
        ctx = torch.cat(inputs, dim=1)
        ctx = F.relu(self.context_bn1(self.context_in(ctx)))
        ctx = self.context_bn2(self.context_conv(ctx))
        return F.relu(identity + ctx)


def resample(x: torch.Tensor, size: int) -> torch.Tensor:
    """Nearest-neighbour upsampling or average-pool downsampling to ``size``."""
    cur = x.shape[-1]
    if cur == size:
        return x
    if cur < size:
        return F.interpolate(x, size=(size, size), mode="nearest")
    return F.adaptive_avg_pool2d(x, size)


class FusionStack(nn.Module):
    """Coarse-to-fine residual fusion over the branch pyramids."""

    def __init__(self, cfg: FusionConfig, main_taps: Dict[int, int], context_taps: Sequence[Dict[int, int]],
                 dem_channels: int):
        super().__init__()
        self.cfg = cfg
        blocks = {}
        adapters = {}
        prev = None
        for d in cfg.scales:
            out = cfg.channels_per_scale[d]
            ctx = [taps[d] for taps in context_taps] + [dem_channels]
            carry = 0
            if prev is not None:
                carry = out
                adapters[str(d)] = nn.Conv2d(cfg.channels_per_scale[prev], carry, 1)
            blocks[str(d)] = ResidualFusionBlock(main_taps[d], ctx, out, carry, cfg.context_reduction)
            prev = d
        self.blocks = nn.ModuleDict(blocks)
        self.carry_adapters = nn.ModuleDict(adapters)

    @property
    def out_channels(self) -> int:
        return self.cfg.channels_per_scale[self.cfg.scales[-1]]

    def forward(self, main: FeaturePyramid, contexts: Sequence[FeaturePyramid], dem_features: torch.Tensor,
                p: int) -> torch.Tensor:
        fused = None
        for d in self.cfg.scales:
            for pyr in (main, *contexts):
                if d not in pyr:
                    raise KeyError(f"pyramid missing scale level {d}")
            size = p // d
            ctx = [pyr[d] for pyr in contexts] + [resample(dem_features, size)]
            carry = None
            if fused is not None:
                # a 1x1 conv commutes with nearest upsampling, so adapt at the coarse size
                carry = F.interpolate(self.carry_adapters[str(d)](fused), size=(size, size), mode="nearest")
            fused = self.blocks[str(d)](main[d], ctx, carry)
        return fused


def fuse_pyramids(stack: FusionStack, pyr_s1_post: FeaturePyramid, pyr_s1_pre: FeaturePyramid,
                  pyr_s2_pre: Optional[FeaturePyramid], dem_features: torch.Tensor, p: int) -> torch.Tensor:
    contexts = [pyr_s1_pre] + ([pyr_s2_pre] if pyr_s2_pre is not None else [])
    return stack(pyr_s1_post, contexts, dem_features, p)
