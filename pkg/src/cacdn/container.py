"""On-disk tile container: one little-endian grid file per modality plus ``sample.json``.

Grid file layout::

    b"CACD" | u32 version=1 | u32 ndim | ndim x u32 dims | data (row-major)

Input grids hold float32 data, mask grids hold uint8 data.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Iterable, List, Optional, Union

import numpy as np

from .core_types import BANDS, Split, TileSample

MAGIC = b"CACD"
VERSION = 1

PathLike = Union[str, os.PathLike]


class ContainerError(ValueError):
    pass


def write_grid(path: PathLike, grid: np.ndarray, mask: bool = False) -> None:
    arr = np.ascontiguousarray(grid, dtype="<u1" if mask else "<f4")
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_grid(path: PathLike) -> np.ndarray:
    """Read a grid; the element type (float32 or uint8) follows from the payload size."""
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise ContainerError(f"{path}: not a CACD grid file")
    version, ndim = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported grid version {version}")
    head = 12 + 4 * ndim
    if len(blob) < head:
        raise ContainerError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", blob, 12)
    n = int(np.prod(dims)) if ndim else 1
    payload = len(blob) - head
    if payload == 4 * n:
        dtype = "<f4"
    elif payload == n:
        dtype = "<u1"
    else:
        raise ContainerError(f"{path}: payload of {payload} bytes does not match dims {dims}")
    return np.frombuffer(blob, dtype=dtype, offset=head).reshape(dims).copy()


def save_sample(sample: TileSample, directory: PathLike, provenance: Optional[dict] = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for modality in BANDS:
        name = f"{modality.value}.bin"
        write_grid(d / name, sample.grid(modality))
        files[modality.value] = name
    if sample.mask is not None:
        write_grid(d / "mask.bin", sample.mask, mask=True)
        files["mask"] = "mask.bin"
    meta = {"id": sample.id, "p": int(sample.p), "split": sample.split.value, "files": files,
            "provenance": provenance or {}}
    with open(d / "sample.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    return d


def load_sample(directory: PathLike) -> TileSample:
    d = Path(directory)
    try:
        with open(d / "sample.json") as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{d}: unreadable sample.json ({exc})") from exc
    files = meta["files"]
    grids = {m.value: read_grid(d / files[m.value]) for m in BANDS}
    mask = read_grid(d / files["mask"]) if "mask" in files else None
    return TileSample(id=meta["id"], p=int(meta["p"]), mask=mask, split=Split(meta["split"]), **grids)


TILES_DIR = "tiles"
MANIFEST = "manifest.json"


def save_tiles(tiles: Iterable[TileSample], root: PathLike, provenance: Optional[dict] = None) -> List[str]:
    root = Path(root)
    ids = []
    for t in tiles:
        save_sample(t, root / TILES_DIR / t.id, provenance)
        ids.append(t.id)
    return ids


def load_tiles(root: PathLike, ids: Optional[Iterable[str]] = None) -> List[TileSample]:
    base = Path(root) / TILES_DIR
    if ids is None:
        ids = sorted(p.name for p in base.iterdir() if (p / "sample.json").exists())
    return [load_sample(base / i) for i in ids]


SCENE_FILES = ("s1_pre", "s1_post", "s2_pre", "dem")


def save_scene(scene, directory: PathLike) -> Path:
    """Write a raw :class:`~cacdn.ingest.SceneStack` as grid files plus ``scene.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in SCENE_FILES:
        write_grid(d / f"{name}.bin", getattr(scene, name))
    if scene.mask is not None:
        write_grid(d / "mask.bin", scene.mask, mask=True)
    meta = {"id": scene.id, "pixel_spacing_m": scene.pixel_spacing_m,
            "split": None if scene.split_hint is None else Split(scene.split_hint).value}
    with open(d / "scene.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
    return d


def load_scene(directory: PathLike):
    from .ingest import SceneStack

    d = Path(directory)
    try:
        with open(d / "scene.json") as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{d}: unreadable scene.json ({exc})") from exc
    grids = {name: read_grid(d / f"{name}.bin") for name in SCENE_FILES}
    mask = read_grid(d / "mask.bin") if (d / "mask.bin").exists() else None
    split = meta.get("split")
    return SceneStack(id=meta["id"], mask=mask, pixel_spacing_m=float(meta.get("pixel_spacing_m", 10.0)),
                      split_hint=None if split is None else Split(split), **grids)
