"""Scene ingestion: terrain derivatives, normalization, tiling, augmentation, splits."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .core_types import PATCH_MULTIPLE, Split, TileSample, validate_sample

log = logging.getLogger(__name__)


@dataclass
class SceneStack:
    """A co-registered scene.

    Raw scenes carry S1 in dB, S2 as reflectance digital numbers and ``dem``
    as elevation in metres (``[H, W]`` or ``[1, H, W]``). After
    :func:`normalize` every grid is in ``[0, 1]`` and ``dem`` is the 4-band
    (elevation, slope, aspect_sin, aspect_cos) stack.
    """

    id: str
    s1_pre: np.ndarray
    s1_post: np.ndarray
    s2_pre: np.ndarray
    dem: np.ndarray
    mask: Optional[np.ndarray] = None
    pixel_spacing_m: float = 10.0
    split_hint: Optional[Split] = None
    normalized: bool = False
    nan_count: int = 0

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.s1_post.shape[-2:])

    def check(self) -> None:
        hw = self.shape
        for name in ("s1_pre", "s1_post", "s2_pre", "dem"):
            if tuple(getattr(self, name).shape[-2:]) != hw:
                raise ValueError(f"{name} spatial shape differs from s1_post {hw}")
        if self.mask is not None and tuple(self.mask.shape) != hw:
            raise ValueError("mask spatial shape differs from inputs")


@dataclass
class NormalizationSpec:
    s1_db_min: float = -30.0
    s1_db_max: float = 0.0
    s2_reflectance_divisor: float = 10000.0
    dem_elev_min: Optional[float] = None
    dem_elev_max: Optional[float] = None

    def __post_init__(self):
        if not self.s1_db_min < self.s1_db_max:
            raise ValueError("s1_db_min must be below s1_db_max")
        if self.s2_reflectance_divisor <= 0:
            raise ValueError("s2_reflectance_divisor must be positive")
        if (self.dem_elev_min is not None and self.dem_elev_max is not None
                and self.dem_elev_min > self.dem_elev_max):
            raise ValueError("dem_elev_min exceeds dem_elev_max")


def compute_slope_aspect(elevation: np.ndarray, pixel_spacing_m: float = 10.0) -> Tuple[np.ndarray, np.ndarray]:
    """Horn (1981) slope and aspect in degrees.

    Rows run north to south and columns west to east. Aspect is the downslope
    direction clockwise from north in ``[0, 360)``; flat cells get 0. Borders
    use edge replication.
    """
    z = np.asarray(elevation, dtype=np.float64)
    if z.ndim != 2 or min(z.shape) < 3:
        raise ValueError("degenerate DEM: need a 2-D grid of at least 3x3")
    if pixel_spacing_m <= 0:
        raise ValueError("pixel_spacing_m must be positive")
    zp = np.pad(z, 1, mode="edge")
    a, b, c = zp[:-2, :-2], zp[:-2, 1:-1], zp[:-2, 2:]
    d, f = zp[1:-1, :-2], zp[1:-1, 2:]
    g, h, i = zp[2:, :-2], zp[2:, 1:-1], zp[2:, 2:]
    dz_east = ((c + 2 * f + i) - (a + 2 * d + g)) / (8.0 * pixel_spacing_m)
    dz_north = ((a + 2 * b + c) - (g + 2 * h + i)) / (8.0 * pixel_spacing_m)
    slope = np.degrees(np.arctan(np.hypot(dz_east, dz_north)))
    aspect = np.degrees(np.arctan2(-dz_east, -dz_north)) % 360.0
    aspect[(dz_east == 0) & (dz_north == 0)] = 0.0
    # % can round tiny negatives up to exactly 360
    aspect[aspect >= 360.0] = 0.0
    return slope, aspect


def _nan_to_zero(x: np.ndarray) -> Tuple[np.ndarray, int]:
    bad = ~np.isfinite(x)
    n = int(bad.sum())
    if n:
        x = np.where(bad, 0.0, x)
    return x, n


def normalize(scene: SceneStack, spec: NormalizationSpec = NormalizationSpec()) -> SceneStack:
    """Map a raw scene onto ``[0, 1]`` and expand the DEM into its 4-band stack.

    Non-finite pixels become 0 after normalization; their total is stored in
    ``nan_count``.
    """
    if scene.normalized:
        raise ValueError(f"scene {scene.id} is already normalized")
    scene.check()
    lo, hi = spec.s1_db_min, spec.s1_db_max

    def s1(x):
        x = np.asarray(x, dtype=np.float64)
        return (np.clip(x, lo, hi) - lo) / (hi - lo)

    s1_pre = s1(scene.s1_pre)
    s1_post = s1(scene.s1_post)
    s2 = np.clip(np.asarray(scene.s2_pre, dtype=np.float64) / spec.s2_reflectance_divisor, 0.0, 1.0)

    elev = np.asarray(scene.dem, dtype=np.float64)
    if elev.ndim == 3:
        elev = elev[0]
    finite = np.isfinite(elev)
    fill = float(np.median(elev[finite])) if finite.any() else 0.0
    elev_filled = np.where(finite, elev, fill)
    slope, aspect = compute_slope_aspect(elev_filled, scene.pixel_spacing_m)
    emin = spec.dem_elev_min if spec.dem_elev_min is not None else float(elev_filled.min())
    emax = spec.dem_elev_max if spec.dem_elev_max is not None else float(elev_filled.max())
    span = emax - emin
    elev_n = np.clip((elev - emin) / span, 0.0, 1.0) if span > 0 else np.zeros_like(elev)
    elev_n = np.where(finite, elev_n, np.nan)
    rad = np.radians(aspect)
    terrain_ok = np.where(finite, 1.0, np.nan)
    dem = np.stack([
        elev_n,
        slope / 90.0 * terrain_ok,
        (np.sin(rad) + 1) / 2 * terrain_ok,
        (np.cos(rad) + 1) / 2 * terrain_ok,
    ])

    nan_count = 0
    grids = {}
    for name, grid in (("s1_pre", s1_pre), ("s1_post", s1_post), ("s2_pre", s2), ("dem", dem)):
        grid, n = _nan_to_zero(grid)
        nan_count += n
        grids[name] = grid.astype(np.float32)
    if nan_count:
        log.warning("scene %s: replaced %d non-finite pixels with 0", scene.id, nan_count)
    return replace(scene, normalized=True, nan_count=nan_count, **grids)


def tile_scene(scene: SceneStack, p: int, stride: Optional[int] = None) -> List[TileSample]:
    """Cut a normalized scene into ``p``x``p`` tiles, row-major, remainders dropped."""
    if not scene.normalized:
        raise ValueError("tile_scene expects a normalized scene")
    stride = p if stride is None else stride
    if stride < 1:
        raise ValueError("stride must be >= 1")
    H, W = scene.shape
    if p > H or p > W:
        raise ValueError(f"tile size {p} exceeds scene {H}x{W}")
    split = scene.split_hint or Split.TRAIN
    tiles = []
    for r, y in enumerate(range(0, H - p + 1, stride)):
        for c, x in enumerate(range(0, W - p + 1, stride)):
            win = (Ellipsis, slice(y, y + p), slice(x, x + p))
            mask = None if scene.mask is None else np.ascontiguousarray(scene.mask[win], dtype=np.uint8)
            tiles.append(TileSample(
                id=f"{scene.id}_{r}_{c}",
                p=p,
                s1_pre=np.ascontiguousarray(scene.s1_pre[win]),
                s1_post=np.ascontiguousarray(scene.s1_post[win]),
                s2_pre=np.ascontiguousarray(scene.s2_pre[win]),
                dem=np.ascontiguousarray(scene.dem[win]),
                mask=mask,
                split=split,
            ))
    if p % PATCH_MULTIPLE:
        log.warning("tile size %d is not a multiple of %d; tiles will fail validation", p, PATCH_MULTIPLE)
    return tiles


@dataclass(frozen=True)
class AugmentParams:
    blur_sigma: Optional[float]
    gamma: Optional[float]


def draw_augment_params(rng_seed: int, blur_prob: float = 0.5, gamma_prob: float = 0.5,
                        sigma_range=(0.5, 1.5), gamma_range=(0.7, 1.4)) -> AugmentParams:
    rng = np.random.default_rng(rng_seed)
    u_blur, u_gamma, u_sigma, u_g = rng.random(4)
    sigma = sigma_range[0] + u_sigma * (sigma_range[1] - sigma_range[0]) if u_blur < blur_prob else None
    gamma = gamma_range[0] + u_g * (gamma_range[1] - gamma_range[0]) if u_gamma < gamma_prob else None
    return AugmentParams(sigma, gamma)


def apply_augment(sample: TileSample, params: AugmentParams) -> TileSample:
    grids = {"s1_pre": sample.s1_pre, "s1_post": sample.s1_post, "s2_pre": sample.s2_pre, "dem": sample.dem}
    if params.blur_sigma is not None:
        s = params.blur_sigma
        grids = {k: gaussian_filter(v, sigma=(0, s, s), mode="reflect") for k, v in grids.items()}
    if params.gamma is not None:
        grids["s2_pre"] = np.power(np.clip(grids["s2_pre"], 0.0, 1.0).astype(np.float64), params.gamma)
    if params.blur_sigma is None and params.gamma is None:
        return sample
    grids = {k: np.clip(v, 0.0, 1.0).astype(np.float32) for k, v in grids.items()}
    return replace(sample, **grids)


def augment(sample: TileSample, rng_seed: int) -> TileSample:
    """Seeded Gaussian blur (all inputs) and gamma contrast (S2 only), each with p=0.5.

    The mask is never touched.
    """
    if sample.split is not Split.TRAIN:
        raise ValueError(f"augment is for TRAIN tiles, {sample.id} is {sample.split.value}")
    return apply_augment(sample, draw_augment_params(rng_seed))


@dataclass
class Manifest:
    train: List[str] = field(default_factory=list)
    val: List[str] = field(default_factory=list)
    test: List[str] = field(default_factory=list)
    label_quality: Optional[Dict[str, str]] = None

    def ids(self, split: Split) -> List[str]:
        return getattr(self, Split(split).value)

    def split_of(self) -> Dict[str, Split]:
        return {i: s for s in Split for i in self.ids(s)}

    def to_json(self) -> dict:
        d = {"train": self.train, "val": self.val, "test": self.test}
        if self.label_quality:
            d["label_quality"] = self.label_quality
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "Manifest":
        unknown = set(d) - {"train", "val", "test", "label_quality"}
        if unknown:
            raise ValueError(f"unknown manifest keys {sorted(unknown)}")
        return cls(list(d.get("train", [])), list(d.get("val", [])), list(d.get("test", [])),
                   d.get("label_quality"))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "Manifest":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _id_key(sample_id: str) -> str:
    return hashlib.sha256(sample_id.encode()).hexdigest()


def _split_counts(n: int, fractions: Sequence[float]) -> List[int]:
    # largest-remainder apportionment so counts always sum to n
    raw = [f * n for f in fractions]
    counts = [math.floor(r) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def build_manifest(samples: Iterable, split_fractions: Sequence[float] = (0.8, 0.0, 0.2),
                   override: Optional[Mapping[str, str]] = None,
                   label_quality: Optional[Mapping[str, str]] = None) -> Manifest:
    """Assign ids to train/val/test deterministically.

    Ids are ordered by SHA-256 of the id and cut by largest-remainder counts,
    so the result depends only on the id set and the fractions. ``override``
    (id -> split name), e.g. a published split file, wins for the ids it lists.
    """
    ids = [s if isinstance(s, str) else s.id for s in samples]
    if not ids:
        raise ValueError("cannot build a manifest from an empty sample list")
    fractions = list(split_fractions)
    if len(fractions) == 2:
        fractions = [fractions[0], 0.0, fractions[1]]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be 3 non-negative numbers summing to 1, got {split_fractions}")
    override = {k: Split(v) for k, v in (override or {}).items()}
    free = sorted((i for i in ids if i not in override), key=lambda i: (_id_key(i), i))
    counts = _split_counts(len(free), fractions)
    buckets = {Split.TRAIN: [], Split.VAL: [], Split.TEST: []}
    start = 0
    for split, n in zip((Split.TRAIN, Split.VAL, Split.TEST), counts):
        buckets[split].extend(free[start:start + n])
        start += n
    for i in ids:
        if i in override:
            buckets[override[i]].append(i)
    for b in buckets.values():
        b.sort()
    lq = {k: v for k, v in label_quality.items()} if label_quality else None
    return Manifest(buckets[Split.TRAIN], buckets[Split.VAL], buckets[Split.TEST], lq)


def carve_validation(manifest: Manifest, fraction: float = 0.1) -> Manifest:
    """Move ``fraction`` of the train ids (at least one) to val when val is empty."""
    if manifest.val or not manifest.train:
        return manifest
    if not 0.0 < fraction < 1.0:
        raise ValueError("validation fraction must lie in (0, 1)")
    ordered = sorted(manifest.train, key=lambda i: (_id_key(i), i))
    k = min(len(ordered) - 1, max(1, round(fraction * len(ordered))))
    if k < 1:
        raise ValueError("need at least two train tiles to carve a validation set")
    val = set(ordered[len(ordered) - k:])
    return Manifest([i for i in manifest.train if i not in val], sorted(val), list(manifest.test),
                    manifest.label_quality)


def check_tiles(tiles: Iterable[TileSample]) -> None:
    for t in tiles:
        problems = validate_sample(t)
        if problems:
            raise ValueError(f"tile {t.id}: " + "; ".join(problems))
