"""Deterministic synthetic multi-source scenes with known change masks.

Each scene is a small terrain with landcover classes, a pre-event optical
image, pre/post radar pairs with gamma speckle and an event footprint. A
``confuser`` landcover (wet vegetation) receives the same radar change as the
event but is not part of the truth mask: radar alone cannot tell the two
apart, the pre-event optical signature can.
"""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter, median_filter

from .container import MANIFEST, save_tiles
from .core_types import TileSample
from .ingest import Manifest, NormalizationSpec, SceneStack, build_manifest, compute_slope_aspect, normalize, tile_scene

log = logging.getLogger(__name__)


class Event(str, enum.Enum):
    FLOOD = "flood"
    LANDSLIDE = "landslide"


class Landcover(enum.IntEnum):
    WATER = 0
    VEGETATION = 1
    BARE = 2
    CONFUSER = 3


# Red, Green, Blue, NIR surface reflectance x 10000
S2_SIGNATURE = {
    Landcover.WATER: (300.0, 500.0, 600.0, 200.0),
    Landcover.VEGETATION: (400.0, 800.0, 500.0, 3500.0),
    Landcover.BARE: (2200.0, 2000.0, 1800.0, 2800.0),
    Landcover.CONFUSER: (500.0, 900.0, 550.0, 1600.0),
}
# VV, VH backscatter in dB; the confuser is radar-identical to vegetation
S1_SIGNATURE = {
    Landcover.WATER: (-22.0, -28.0),
    Landcover.VEGETATION: (-9.0, -15.0),
    Landcover.BARE: (-12.0, -19.0),
    Landcover.CONFUSER: (-9.0, -15.0),
}
EVENT_SIGNATURE = {
    Event.FLOOD: (-21.0, -27.0),
    Event.LANDSLIDE: (-2.0, -8.0),
}
FLOOD_MAX_SLOPE_DEG = 5.0


@dataclass
class SynthConfig:
    seed: int = 0
    n_scenes: int = 4
    scene_size: int = 256
    p: int = 128
    event: Event = Event.FLOOD
    confuser_fraction: float = 0.3
    speckle_looks: int = 4
    pixel_spacing_m: float = 10.0

    def __post_init__(self):
        self.event = Event(self.event)
        if self.scene_size < self.p:
            raise ValueError("scene_size must be >= p")
        if not 0.0 <= self.confuser_fraction <= 1.0:
            raise ValueError("confuser_fraction must lie in [0, 1]")
        if self.speckle_looks < 1:
            raise ValueError("speckle_looks must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["event"] = self.event.value
        return d


@dataclass
class SynthScene:
    """A raw scene plus the generator's ground truth layers."""

    scene: SceneStack
    truth: np.ndarray          # uint8 change mask
    landcover: np.ndarray      # Landcover codes
    radar_changed: np.ndarray  # bool, truth plus shifted confusers
    slope_deg: np.ndarray


def smooth_field(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    f = gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def _terrain(rng, size: int, event: Event) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if event is Event.FLOOD:
        z = 40.0 + 15.0 * smooth_field(rng, size, size / 6)
        n_hills, amp, width = 7, (20.0, 120.0), (15.0, 40.0)
    else:
        z = 300.0 + 40.0 * smooth_field(rng, size, size / 6)
        n_hills, amp, width = 6, (200.0, 600.0), (20.0, 50.0)
    for _ in range(n_hills):
        cy, cx = rng.uniform(0, size, 2)
        a = rng.uniform(*amp)
        s = rng.uniform(*width)
        z += a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return z


def _speckle_db(rng, db: np.ndarray, looks: int) -> np.ndarray:
    power = 10.0 ** (db / 10.0) * rng.gamma(looks, 1.0 / looks, size=db.shape)
    return 10.0 * np.log10(np.maximum(power, 1e-12))


def _split_confusers(rng, candidates: np.ndarray, fraction: float, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Return (confuser landcover mask, shifted confuser mask)."""
    field = smooth_field(rng, size, 6.0)
    if fraction <= 0 or not candidates.any():
        none = np.zeros_like(candidates)
        return none, none
    t = np.quantile(field[candidates], fraction)
    confuser_class = field <= t
    return confuser_class, confuser_class & candidates


def generate_scene(cfg: SynthConfig, scene_index: int) -> SynthScene:
    """Build scene ``scene_index`` of ``cfg``; pure in ``(cfg, scene_index)``."""
    rng = np.random.default_rng([cfg.seed, scene_index, 0 if cfg.event is Event.FLOOD else 1])
    size = cfg.scene_size
    elevation = _terrain(rng, size, cfg.event)
    slope, _ = compute_slope_aspect(elevation, cfg.pixel_spacing_m)

    landcover = np.where(smooth_field(rng, size, 12.0) > -0.3, Landcover.VEGETATION, Landcover.BARE).astype(np.int8)
    if cfg.event is Event.FLOOD:
        water = elevation <= np.quantile(elevation, 0.06)
        landcover[water] = Landcover.WATER
        low = elevation <= np.quantile(elevation, 0.30)
        near = distance_transform_edt(~water) <= rng.uniform(10.0, 18.0)
        candidates = low & near & (slope < FLOOD_MAX_SLOPE_DEG) & ~water
    else:
        water = np.zeros((size, size), dtype=bool)
        steep = np.argwhere(slope > 25.0)
        candidates = np.zeros((size, size), dtype=bool)
        if len(steep):
            yy, xx = np.mgrid[0:size, 0:size]
            wobble = 3.0 * smooth_field(rng, size, 4.0)
            for k in rng.choice(len(steep), size=min(len(steep), int(rng.integers(7, 12))), replace=False):
                cy, cx = steep[k]
                r = rng.uniform(6.0, 14.0)
                candidates |= np.hypot(yy - cy, xx - cx) + wobble <= r
            candidates &= slope > 12.0

    confuser_class, confusers = _split_confusers(rng, candidates, cfg.confuser_fraction, size)
    landcover[confuser_class & ~water] = Landcover.CONFUSER
    truth = candidates & ~confusers
    radar_changed = candidates

    s2 = np.zeros((4, size, size))
    s1_base = np.zeros((2, size, size))
    for cls in Landcover:
        sel = landcover == cls
        s2[:, sel] = np.asarray(S2_SIGNATURE[cls])[:, None]
        s1_base[:, sel] = np.asarray(S1_SIGNATURE[cls])[:, None]
    illumination = 1.0 + 0.05 * smooth_field(rng, size, 20.0)
    s2 = s2 * illumination * (1.0 + 0.05 * rng.standard_normal(s2.shape))
    s2 = np.clip(s2, 0.0, 10000.0)
    texture = 1.0 * smooth_field(rng, size, 3.0)
    s1_base = s1_base + texture
    s1_pre = _speckle_db(rng, s1_base, cfg.speckle_looks)
    s1_post_base = s1_base.copy()
    s1_post_base[:, radar_changed] = np.asarray(EVENT_SIGNATURE[cfg.event])[:, None] + texture[radar_changed]
    s1_post = _speckle_db(rng, s1_post_base, cfg.speckle_looks)

    scene = SceneStack(
        id=f"{cfg.event.value}{cfg.seed}s{scene_index:03d}",
        s1_pre=s1_pre.astype(np.float32),
        s1_post=s1_post.astype(np.float32),
        s2_pre=s2.astype(np.float32),
        dem=elevation.astype(np.float64),
        mask=truth.astype(np.uint8),
        pixel_spacing_m=cfg.pixel_spacing_m,
    )
    return SynthScene(scene, truth.astype(np.uint8), landcover, radar_changed, slope)


def radar_threshold_oracle(scene: SceneStack, event: Event, window: int = 3) -> np.ndarray:
    """Median-filtered dB change (mean of VV/VH) thresholded at half the smallest class shift."""
    diff = (np.asarray(scene.s1_post, np.float64) - np.asarray(scene.s1_pre, np.float64)).mean(axis=0)
    diff = median_filter(diff, window, mode="nearest")
    sig = np.mean(EVENT_SIGNATURE[event])
    shifts = [sig - np.mean(S1_SIGNATURE[c]) for c in (Landcover.VEGETATION, Landcover.BARE)]
    if event is Event.FLOOD:
        return (diff < max(shifts) / 2).astype(np.uint8)
    return (diff > min(shifts) / 2).astype(np.uint8)


def generate_tiles(cfg: SynthConfig, norm: NormalizationSpec = NormalizationSpec()) -> List[TileSample]:
    tiles = []
    for i in range(cfg.n_scenes):
        scene = normalize(generate_scene(cfg, i).scene, norm)
        tiles.extend(tile_scene(scene, cfg.p, cfg.p))
    return tiles


def assign_splits(tiles: Sequence[TileSample], manifest: Manifest) -> List[TileSample]:
    from dataclasses import replace

    where = manifest.split_of()
    return [replace(t, split=where[t.id]) for t in tiles]


def generate_dataset(cfg: SynthConfig, out_dir, split_fractions=(0.8, 0.1, 0.1),
                     norm: NormalizationSpec = NormalizationSpec()) -> Manifest:
    """Write tiles, ``manifest.json`` and ``synth_config.json`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tiles = generate_tiles(cfg, norm)
    manifest = build_manifest(tiles, split_fractions)
    tiles = assign_splits(tiles, manifest)
    save_tiles(tiles, out, provenance={"generator": "synthgen", "config": cfg.to_dict()})
    manifest.save(out / MANIFEST)
    with open(out / "synth_config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
    rate = float(np.mean([t.mask.mean() for t in tiles]))
    log.info("wrote %d tiles to %s (positive rate %.3f)", len(tiles), out, rate)
    return manifest
