"""Per-modality foundation autoencoder and its self-supervised pretraining.

The encoder is a ResNet-50-style stack of bottleneck residual stages behind a
stride-2 7x7 stem (no max-pool). The decoder is a chain of upsampling blocks
(conv3x3 -> batch-norm -> x2 nearest upsample -> ReLU) whose outputs double
as the multi-scale taps consumed by the fusion stack.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core_types import FeaturePyramid, Variant

log = logging.getLogger(__name__)

RESNET50_STAGE_CHANNELS = (256, 512, 1024, 2048)
RESNET50_BLOCKS = (3, 4, 6, 3)
RESNET50_STEM = 64
EPS = 1e-7


@dataclass
class AutoencoderConfig:
    in_channels: int
    depth: Variant = Variant.LARGE
    width: float = 0.25
    blocks: Tuple[int, ...] = RESNET50_BLOCKS
    use_skips: bool = True

    def __post_init__(self):
        self.depth = Variant(self.depth)
        self.blocks = tuple(int(b) for b in self.blocks)
        if self.in_channels < 1:
            raise ValueError("in_channels must be positive")
        if self.width <= 0:
            raise ValueError("width must be positive")
        if len(self.blocks) < self.levels - 1:
            raise ValueError(f"need {self.levels - 1} block counts, got {len(self.blocks)}")

    @property
    def levels(self) -> int:
        """Number of x2 reductions (stem included)."""
        return 4 if self.depth is Variant.LARGE else 3

    @property
    def stem_channels(self) -> int:
        return max(4, int(round(RESNET50_STEM * self.width)))

    @property
    def stage_channels(self) -> List[int]:
        chans = [max(4, int(round(c * self.width))) for c in RESNET50_STAGE_CHANNELS]
        return chans[: self.levels]

    @property
    def decoder_channels(self) -> List[int]:
        return [c // 2 for c in reversed(self.stage_channels)]

    @property
    def tap_scales(self) -> List[int]:
        return [8, 4, 2] if self.depth is Variant.LARGE else [4, 2]

    def tap_channels(self) -> Dict[int, int]:
        # decoder block i outputs at divisor 2**(levels - 1 - i)
        return {2 ** (self.levels - 1 - i): c for i, c in enumerate(self.decoder_channels)
                if 2 ** (self.levels - 1 - i) in self.tap_scales}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depth"] = self.depth.value
        d["blocks"] = list(self.blocks)
        return d


@dataclass(frozen=True)
class ReconstructionLossWeights:
    w_ce: float = 0.5
    w_mse: float = 0.5

    def __post_init__(self):
        if abs(self.w_ce + self.w_mse - 1.0) > 1e-12:
            raise ValueError("reconstruction weights must sum to 1")


def conv_bn(cin: int, cout: int, k: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2, bias=False),
        nn.BatchNorm2d(cout, momentum=0.1),
    )


class Bottleneck(nn.Module):
    """ResNet-50 bottleneck: 1x1 reduce, 3x3 (strided), 1x1 expand, residual add."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        mid = max(1, cout // 4)
        self.reduce = conv_bn(cin, mid, 1)
        self.spatial = conv_bn(mid, mid, 3, stride)
        self.expand = conv_bn(mid, cout, 1)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = conv_bn(cin, cout, 1, stride)

    def forward(self, x):
        y = F.relu(self.reduce(x))
        y = F.relu(self.spatial(y))
        y = self.expand(y)
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(y + skip)


class UpBlock(nn.Module):
    """conv3x3 -> batch-norm -> x2 nearest upsample -> ReLU."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(cout, momentum=0.1)

    def forward(self, x):
        x = self.bn(self.conv(x))
        return F.relu(F.interpolate(x, scale_factor=2, mode="nearest"))


class Encoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.stem = nn.Sequential(conv_bn(cfg.in_channels, cfg.stem_channels, 7, 2), nn.ReLU())
        stages = []
        cin = cfg.stem_channels
        for i, cout in enumerate(cfg.stage_channels[: cfg.levels - 1]):
            stride = 1 if i == 0 else 2
            blocks = [Bottleneck(cin, cout, stride)]
            blocks += [Bottleneck(cout, cout) for _ in range(cfg.blocks[i] - 1)]
            stages.append(nn.Sequential(*blocks))
            cin = cout
        # the final stage carries the last reduction
        last = cfg.levels - 1
        cout = cfg.stage_channels[last]
        blocks = [Bottleneck(cin, cout, 2)] + [Bottleneck(cout, cout) for _ in range(cfg.blocks[last] - 1)]
        stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)

    def forward(self, x) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats[-1], feats[:-1]


class Decoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.cfg = cfg
        skip_chans = list(reversed(cfg.stage_channels[:-1]))
        blocks = []
        cin = cfg.stage_channels[-1]
        for i, cout in enumerate(cfg.decoder_channels):
            extra = skip_chans[i - 1] if (cfg.use_skips and i > 0) else 0
            blocks.append(UpBlock(cin + extra, cout))
            cin = cout
        self.blocks = nn.ModuleList(blocks)
        self.out = nn.Conv2d(cin, cfg.in_channels, 1)

    def forward(self, bottleneck, skips) -> Tuple[torch.Tensor, FeaturePyramid]:
        cfg = self.cfg
        skips = list(reversed(skips))
        if len(skips) != len(self.blocks) - 1:
            raise ValueError(f"expected {len(self.blocks) - 1} skip features, got {len(skips)}")
        x = bottleneck
        levels = {}
        for i, block in enumerate(self.blocks):
            if cfg.use_skips and i > 0:
                skip = skips[i - 1]
                if skip.shape[-2:] != x.shape[-2:]:
                    raise ValueError(f"skip {i - 1} spatial {tuple(skip.shape[-2:])} != {tuple(x.shape[-2:])}")
                x = torch.cat([x, skip], dim=1)
            x = block(x)
            d = 2 ** (cfg.levels - 1 - i)
            if d in cfg.tap_scales:
                levels[d] = x
        return torch.sigmoid(self.out(x)), FeaturePyramid(levels)


class Autoencoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected [B, {self.cfg.in_channels}, p, p], got {tuple(x.shape)}")
        p = x.shape[-1]
        if x.shape[-2] != p or p % (2 ** self.cfg.levels):
            raise ValueError(f"patch size {tuple(x.shape[-2:])} not divisible by {2 ** self.cfg.levels}")

    def encode(self, x):
        self.check_input(x)
        return self.encoder(x)

    def decode(self, bottleneck, skips):
        return self.decoder(bottleneck, skips)

    def forward(self, x):
        return self.decode(*self.encode(x))


def reconstruction_loss(recon: torch.Tensor, target: torch.Tensor,
                        weights: ReconstructionLossWeights = ReconstructionLossWeights(),
                        excess: bool = True):
    """Weighted soft-label BCE + MSE reconstruction loss.

    Returns ``(total, l_ce, l_mse)``. With ``excess=True`` the target's own
    Bernoulli entropy is subtracted from the cross-entropy, so a perfect
    reconstruction scores zero for any target in ``[0, 1]``; gradients are the
    same either way.
    """
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(recon.shape)} vs {tuple(target.shape)}")
    q = recon.clamp(EPS, 1 - EPS)
    t = target
    ce = -(t * torch.log(q) + (1 - t) * torch.log1p(-q))
    if excess:
        ce = ce + torch.xlogy(t, t) + torch.xlogy(1 - t, 1 - t)
    l_ce = ce.mean()
    l_mse = ((recon - target) ** 2).mean()
    return weights.w_ce * l_ce + weights.w_mse * l_mse, l_ce, l_mse


@dataclass
class PretrainSchedule:
    epochs: int = 50
    batch_size: int = 4
    lr: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


def pretrain(model: Autoencoder, grids: Sequence[np.ndarray] | np.ndarray,
             schedule: PretrainSchedule = PretrainSchedule(), seed: int = 0,
             weights: ReconstructionLossWeights = ReconstructionLossWeights(),
             on_epoch=None) -> Tuple[Dict[str, torch.Tensor], List[float]]:
    """Train ``model`` to reconstruct ``grids`` (``[N, C, p, p]``, values in [0, 1]).

    Returns the trained state dict and the per-epoch mean training loss.
    Batch order is a function of ``(seed, epoch)`` only.
    """
    data = torch.as_tensor(np.asarray(grids, dtype=np.float32))
    if data.ndim != 4 or len(data) == 0:
        raise ValueError("pretraining needs a non-empty [N, C, p, p] stack")
    opt = torch.optim.Adam(model.parameters(), lr=schedule.lr, betas=schedule.betas, eps=schedule.eps)
    history: List[float] = []
    n = len(data)
    for epoch in range(schedule.epochs):
        model.train()
        order = np.random.default_rng([seed, epoch]).permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, schedule.batch_size):
            batch = data[order[start:start + schedule.batch_size]]
            recon, _ = model(batch)
            loss, _, _ = reconstruction_loss(recon, batch, weights)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"pretraining diverged at epoch {epoch}, batch {start}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(batch)
            count += len(batch)
        history.append(total / count)
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
        log.debug("pretrain epoch %d loss %.6f", epoch, history[-1])
    return model.state_dict(), history


@torch.no_grad()
def reconstruction_error(model: Autoencoder, grids, batch_size: int = 8,
                         weights: ReconstructionLossWeights = ReconstructionLossWeights()) -> float:
    """Mean reconstruction loss in eval mode (running batch-norm statistics)."""
    model.eval()
    data = torch.as_tensor(np.asarray(grids, dtype=np.float32))
    total = 0.0
    for start in range(0, len(data), batch_size):
        batch = data[start:start + batch_size]
        loss, _, _ = reconstruction_loss(model(batch)[0], batch, weights)
        total += loss.item() * len(batch)
    return total / len(data)
