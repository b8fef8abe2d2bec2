"""CACDN assembly: three foundation autoencoders, the DEM branch, fusion and head."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import stable_hash
from .core_types import (BANDS, SENTINEL_MODALITIES, FeaturePyramid, Modality, TileSample, Variant,
                         validate_sample)
from .foundation import Autoencoder, AutoencoderConfig, UpBlock
from .fusion import FusionConfig, FusionStack

VARIANT_PATCH = {Variant.LARGE: 256, Variant.SMALL: 128}
PROB_EPS = 1e-7


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    variant: Variant = Variant.LARGE
    p: int = 0
    use_s2_pre: bool = True
    width: float = 0.25
    dem_branch_channels: int = 64
    head_channels: int = 32
    autoencoder_cfgs: Dict[str, AutoencoderConfig] = field(default_factory=dict)
    fusion_cfg: Optional[FusionConfig] = None

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if not self.p:
            self.p = VARIANT_PATCH[self.variant]
        if self.p != VARIANT_PATCH[self.variant]:
            raise ConfigError(f"variant {self.variant.value} requires p={VARIANT_PATCH[self.variant]}, got {self.p}")
        if not self.autoencoder_cfgs:
            self.autoencoder_cfgs = {
                m.value: AutoencoderConfig(BANDS[m].count, self.variant, self.width) for m in SENTINEL_MODALITIES
            }
        self.autoencoder_cfgs = {
            k: v if isinstance(v, AutoencoderConfig) else AutoencoderConfig(**v)
            for k, v in self.autoencoder_cfgs.items()
        }
        if self.fusion_cfg is None:
            self.fusion_cfg = FusionConfig(self.variant)
        elif not isinstance(self.fusion_cfg, FusionConfig):
            self.fusion_cfg = FusionConfig(**self.fusion_cfg)
        if self.fusion_cfg.variant is not self.variant:
            raise ConfigError("fusion variant differs from model variant")
        for name, ae in self.autoencoder_cfgs.items():
            if ae.depth is not self.variant:
                raise ConfigError(f"autoencoder {name} depth differs from model variant")
            if not set(self.fusion_cfg.scales) <= set(ae.tap_scales):
                raise ConfigError(f"autoencoder {name} does not tap fusion scales {self.fusion_cfg.scales}")

    @property
    def active_modalities(self):
        return tuple(m for m in SENTINEL_MODALITIES if self.use_s2_pre or m is not Modality.S2_PRE)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant.value,
            "p": self.p,
            "use_s2_pre": self.use_s2_pre,
            "width": self.width,
            "dem_branch_channels": self.dem_branch_channels,
            "head_channels": self.head_channels,
            "autoencoder_cfgs": {k: v.to_dict() for k, v in sorted(self.autoencoder_cfgs.items())},
            "fusion_cfg": self.fusion_cfg.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        d = dict(d)
        if "fusion_cfg" in d and d["fusion_cfg"] is not None:
            f = dict(d["fusion_cfg"])
            if "channels_per_scale" in f:
                f["channels_per_scale"] = {int(k): v for k, v in f["channels_per_scale"].items()}
            d["fusion_cfg"] = FusionConfig(**f)
        return cls(**d)


def config_hash(cfg: Union[ModelConfig, AutoencoderConfig]) -> int:
    return stable_hash(cfg.to_dict())


@dataclass
class ForwardOutput:
    change_prob: torch.Tensor  # [B, p, p]
    reconstructions: Dict[Modality, torch.Tensor]
    pyramids: Dict[Modality, FeaturePyramid]
    logits: Optional[torch.Tensor] = None


class DemBranch(nn.Sequential):
    """Two (3x3 stride-2 conv -> batch-norm -> ReLU) sets; output at p/4."""

    def __init__(self, in_channels: int, channels: int):
        super().__init__(
            nn.Conv2d(in_channels, channels, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(),
        )


class ChangeHead(nn.Module):
    def __init__(self, cin: int, channels: int):
        super().__init__()
        self.up = UpBlock(cin, channels)
        self.refine = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(channels)
        self.out = nn.Conv2d(channels, 1, 1)

    def forward(self, x):
        x = F.relu(self.bn(self.refine(self.up(x))))
        return self.out(x)[:, 0]


class CACDN(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.branches = nn.ModuleDict({
            m.value: Autoencoder(cfg.autoencoder_cfgs[m.value]) for m in cfg.active_modalities
        })
        self.dem_branch = DemBranch(BANDS[Modality.DEM_STACK].count, cfg.dem_branch_channels)
        taps = {m: cfg.autoencoder_cfgs[m.value].tap_channels() for m in cfg.active_modalities}
        contexts = [taps[m] for m in cfg.active_modalities if m is not Modality.S1_POST]
        self.fusion = FusionStack(cfg.fusion_cfg, taps[Modality.S1_POST], contexts, cfg.dem_branch_channels)
        self.head = ChangeHead(self.fusion.out_channels, cfg.head_channels)

    def forward(self, inputs: Mapping[Modality, torch.Tensor]) -> ForwardOutput:
        p = self.cfg.p
        recons, pyramids = {}, {}
        for m in self.cfg.active_modalities:
            x = inputs[m]
            if x.shape[-2:] != (p, p):
                raise ConfigError(f"{m.value} is {tuple(x.shape[-2:])}, model expects {p}x{p}")
            recons[m], pyramids[m] = self.branches[m.value](x)
        dem = inputs[Modality.DEM_STACK]
        dem_features = self.dem_branch(dem)
        contexts = [pyramids[m] for m in self.cfg.active_modalities if m is not Modality.S1_POST]
        fused = self.fusion(pyramids[Modality.S1_POST], contexts, dem_features, p)
        logits = self.head(fused)
        prob = torch.sigmoid(logits).clamp(PROB_EPS, 1 - PROB_EPS)
        return ForwardOutput(prob, recons, pyramids, logits)

    def branch_parameters(self, modality: Modality):
        return self.branches[modality.value].parameters()


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def batch_inputs(samples: Sequence[TileSample]) -> Dict[Modality, torch.Tensor]:
    return {m: torch.from_numpy(np.stack([s.grid(m) for s in samples]).astype(np.float32, copy=False))
            for m in BANDS}


def batch_masks(samples: Sequence[TileSample]) -> torch.Tensor:
    if any(s.mask is None for s in samples):
        raise ValueError("sample without mask in a supervised batch")
    return torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.float32))


def forward(model: CACDN, sample: TileSample) -> ForwardOutput:
    """Run one tile through the model (no batch dimension in the result)."""
    if sample.p != model.cfg.p:
        raise ConfigError(f"sample p={sample.p} but model p={model.cfg.p}")
    problems = validate_sample(sample)
    if problems:
        raise ValueError("invalid sample: " + "; ".join(problems))
    out = model(batch_inputs([sample]))
    return ForwardOutput(
        out.change_prob[0],
        {m: r[0] for m, r in out.reconstructions.items()},
        {m: FeaturePyramid({d: t[0] for d, t in pyr.levels.items()}) for m, pyr in out.pyramids.items()},
        out.logits[0],
    )


def predict_mask(change_prob, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    if isinstance(change_prob, torch.Tensor):
        change_prob = change_prob.detach().cpu().numpy()
    return (np.asarray(change_prob) >= threshold).astype(np.uint8)


def autoencoder_checkpoint(ae: Autoencoder, modality: Modality, epoch: int = 0, history=(), optimizer=None):
    from .checkpoint import Checkpoint

    return Checkpoint(
        config=ae.cfg.to_dict(),
        weights={k: v.detach().clone() for k, v in ae.state_dict().items()},
        phase="pretrain",
        epoch=epoch,
        optimizer=None if optimizer is None else optimizer.state_dict(),
        rng_state=torch.get_rng_state(),
        history=list(history),
        extra={"modality": Modality(modality).value},
    )


def load_pretrained_branches(model: CACDN, checkpoints: Mapping, allow_missing: bool = False) -> CACDN:
    """Copy pretrained autoencoder weights into the model's active branches.

    Every checkpoint is read and verified before any weight is replaced, so a
    bad file leaves ``model`` untouched. Checkpoints for inactive branches
    (S2 in the ablation) are ignored.
    """
    from .checkpoint import load_checkpoint

    paths = {Modality(k): v for k, v in checkpoints.items()}
    staged = {}
    for m in model.cfg.active_modalities:
        if m not in paths or paths[m] is None:
            if allow_missing:
                continue
            raise ConfigError(f"no pretrained checkpoint for active branch {m.value}")
        ckpt = load_checkpoint(paths[m], model.cfg.autoencoder_cfgs[m.value].to_dict())
        staged[m] = ckpt.weights
    for m, weights in staged.items():
        model.branches[m.value].load_state_dict(weights)
    return model
