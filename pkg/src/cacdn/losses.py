"""Supervised segmentation losses and the combined training objective.

    total = sup_weight * (focal + dice) + selfsup_weight * (ce + beta * mse)

All terms are pixel means, so tile and batch size never change their balance.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Mapping, Optional

import torch

from .core_types import Modality
from .foundation import EPS, reconstruction_loss


@dataclass
class LossConfig:
    sup_weight: float = 0.6
    selfsup_weight: float = 0.4
    beta: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    dice_smooth: float = 1.0

    def __post_init__(self):
        if abs(self.sup_weight + self.selfsup_weight - 1.0) > 1e-12:
            raise ValueError("sup_weight + selfsup_weight must equal 1")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be > 0")


@dataclass
class LossBreakdown:
    l_focal: torch.Tensor
    l_dice: torch.Tensor
    l_ce: torch.Tensor
    l_mse: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {k: getattr(self, k).item() for k in ("l_focal", "l_dice", "l_ce", "l_mse", "total")}


def _check(prob, mask):
    if prob.shape != mask.shape:
        raise ValueError(f"shape mismatch: prob {tuple(prob.shape)} vs mask {tuple(mask.shape)}")


def focal_loss(prob: torch.Tensor, mask: torch.Tensor, gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    """Mean of ``-alpha_t (1 - p_t)**gamma log p_t`` over all pixels."""
    _check(prob, mask)
    mask = mask.to(prob.dtype)
    q = prob.clamp(EPS, 1 - EPS)
    p_t = mask * q + (1 - mask) * (1 - q)
    alpha_t = mask * alpha + (1 - mask) * (1 - alpha)
    return (-alpha_t * (1 - p_t) ** gamma * torch.log(p_t)).mean()


def dice_loss(prob: torch.Tensor, mask: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    """Soft dice over all pixels of the input (batch included)."""
    _check(prob, mask)
    mask = mask.to(prob.dtype)
    inter = (prob * mask).sum()
    return 1 - (2 * inter + smooth) / (prob.sum() + mask.sum() + smooth)


def combine(l_focal, l_dice, l_ce, l_mse, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    total = cfg.sup_weight * (l_focal + l_dice) + cfg.selfsup_weight * (l_ce + cfg.beta * l_mse)
    return LossBreakdown(l_focal, l_dice, l_ce, l_mse, total)


def total_loss(output, inputs: Mapping[Modality, torch.Tensor], mask: Optional[torch.Tensor],
               cfg: LossConfig = LossConfig(), use_s2: bool = True) -> LossBreakdown:
    """Loss of a forward pass against its inputs (reconstruction) and mask.

    Reconstruction CE/MSE are averaged over the active Sentinel branches.
    """
    if mask is None:
        raise ValueError("total_loss needs a change mask")
    l_focal = focal_loss(output.change_prob, mask, cfg.focal_gamma, cfg.focal_alpha)
    l_dice = dice_loss(output.change_prob, mask, cfg.dice_smooth)
    ces, mses = [], []
    for m, recon in output.reconstructions.items():
        if m is Modality.S2_PRE and not use_s2:
            continue
        _, ce, mse = reconstruction_loss(recon, inputs[m])
        ces.append(ce)
        mses.append(mse)
    if not ces:
        raise ValueError("no reconstruction branches in forward output")
    l_ce = torch.stack(ces).mean()
    l_mse = torch.stack(mses).mean()
    return combine(l_focal, l_dice, l_ce, l_mse, cfg)
