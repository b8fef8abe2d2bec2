"""Shared records: band layouts, tile samples and feature pyramids."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

import numpy as np


class Modality(str, enum.Enum):
    S1_PRE = "s1_pre"
    S1_POST = "s1_post"
    S2_PRE = "s2_pre"
    DEM_STACK = "dem"


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class Variant(str, enum.Enum):
    LARGE = "large"
    SMALL = "small"


@dataclass(frozen=True)
class BandSpec:
    modality: Modality
    band_names: tuple

    @property
    def count(self) -> int:
        return len(self.band_names)


BANDS: Dict[Modality, BandSpec] = {
    Modality.S1_PRE: BandSpec(Modality.S1_PRE, ("VV", "VH")),
    Modality.S1_POST: BandSpec(Modality.S1_POST, ("VV", "VH")),
    Modality.S2_PRE: BandSpec(Modality.S2_PRE, ("Red", "Green", "Blue", "NIR")),
    Modality.DEM_STACK: BandSpec(
        Modality.DEM_STACK, ("elevation", "slope", "aspect_sin", "aspect_cos")
    ),
}

# Sentinel branches that run through an autoencoder, in fusion order.
SENTINEL_MODALITIES = (Modality.S1_POST, Modality.S1_PRE, Modality.S2_PRE)

PATCH_MULTIPLE = 16


@dataclass(frozen=True, eq=False)
class TileSample:
    """One co-registered multi-modal tile.

    Input grids are float32 ``[bands, p, p]`` normalized to ``[0, 1]``; ``mask``
    is a ``uint8`` ``[p, p]`` grid with 1 marking changed pixels, or ``None``
    at inference time.
    """

    id: str
    p: int
    s1_pre: np.ndarray
    s1_post: np.ndarray
    s2_pre: np.ndarray
    dem: np.ndarray
    mask: Optional[np.ndarray] = None
    split: Split = Split.TRAIN

    def grid(self, modality: Modality) -> np.ndarray:
        return getattr(self, modality.value)

    def inputs(self) -> Dict[Modality, np.ndarray]:
        return {m: self.grid(m) for m in BANDS}


def validate_sample(sample: TileSample) -> List[str]:
    """Return every invariant violation of ``sample`` (empty when valid)."""
    problems: List[str] = []
    p = sample.p
    if not isinstance(p, (int, np.integer)) or p <= 0 or p % PATCH_MULTIPLE:
        problems.append(f"p: must be a positive multiple of {PATCH_MULTIPLE}, got {p!r}")
    for modality, spec in BANDS.items():
        name = modality.value
        grid = sample.grid(modality)
        if grid is None:
            problems.append(f"{name}: missing")
            continue
        grid = np.asarray(grid)
        if grid.ndim != 3 or grid.shape[0] != spec.count:
            problems.append(f"{name}: expected {spec.count} bands")
            continue
        if grid.shape[1:] != (p, p):
            problems.append(f"{name}: expected spatial shape ({p}, {p}), got {grid.shape[1:]}")
            continue
        if not np.all(np.isfinite(grid)):
            problems.append(f"{name}: non-finite values")
        elif grid.size and (grid.min() < 0.0 or grid.max() > 1.0):
            problems.append(f"{name}: values outside [0, 1]")
    if sample.mask is not None:
        mask = np.asarray(sample.mask)
        if mask.shape != (p, p):
            problems.append(f"mask: expected shape ({p}, {p}), got {mask.shape}")
        elif not np.isin(mask, (0, 1)).all():
            problems.append("mask: non-binary value")
    if not isinstance(sample.split, Split):
        problems.append(f"split: unknown value {sample.split!r}")
    return problems


@dataclass
class FeaturePyramid:
    """Multi-scale maps keyed by scale divisor ``d`` with spatial size ``p / d``.

    Maps are batched tensors ``[B, C_d, p/d, p/d]`` inside the network.
    """

    levels: Dict[int, "object"] = field(default_factory=dict)

    def __getitem__(self, d: int):
        return self.levels[d]

    def __contains__(self, d: int) -> bool:
        return d in self.levels

    @property
    def scales(self) -> tuple:
        return tuple(sorted(self.levels, reverse=True))

    def check(self, p: int) -> None:
        for d, grid in self.levels.items():
            if tuple(grid.shape[-2:]) != (p // d, p // d):
                raise ValueError(f"pyramid level {d}: expected {p // d}x{p // d}, got {tuple(grid.shape[-2:])}")


def sample_from_mapping(sample_id: str, p: int, grids: Mapping[str, np.ndarray], mask=None,
                        split: Split = Split.TRAIN) -> TileSample:
    return TileSample(
        id=sample_id,
        p=p,
        s1_pre=np.asarray(grids["s1_pre"], dtype=np.float32),
        s1_post=np.asarray(grids["s1_post"], dtype=np.float32),
        s2_pre=np.asarray(grids["s2_pre"], dtype=np.float32),
        dem=np.asarray(grids["dem"], dtype=np.float32),
        mask=None if mask is None else np.asarray(mask, dtype=np.uint8),
        split=Split(split),
    )
