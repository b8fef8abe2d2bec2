"""Binary checkpoint format.

Layout::

    b"CKPT" | u32 version | u64 config_hash | u64 header_len | JSON header | blobs

The JSON header records phase, epoch, the full config, an array directory
(name, dims, stored dtype, offset, byte count), optimizer/scheduler metadata,
the torch RNG state, the loss history and a SHA-256 of the blob section. Every
array is stored as little-endian float32; integer buffers are cast back on load.
"""
from __future__ import annotations

import base64
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import torch

MAGIC = b"CKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sIQQ")


class CheckpointError(ValueError):
    """Base class; ``str(type(err).__name__)`` is the machine-readable error class."""


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class ConfigHashMismatch(CheckpointError):
    def __init__(self, message: str, field_path: Optional[str] = None):
        super().__init__(message)
        self.field_path = field_path


def stable_hash(obj) -> int:
    """64-bit hash of the canonical JSON form of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def first_difference(a, b, path: str = "") -> Optional[str]:
    """Dotted path of the first field where two JSON-like documents differ."""
    if isinstance(a, dict) and isinstance(b, dict):
        for k in sorted(set(a) | set(b), key=str):
            if k not in a or k not in b:
                return f"{path}.{k}".lstrip(".")
            sub = first_difference(a[k], b[k], f"{path}.{k}")
            if sub is not None:
                return sub
        return None
    if isinstance(a, list) and isinstance(b, list):
        if len(a) != len(b):
            return path.lstrip(".") or "<root>"
        for i, (x, y) in enumerate(zip(a, b)):
            sub = first_difference(x, y, f"{path}[{i}]")
            if sub is not None:
                return sub
        return None
    return None if a == b else (path.lstrip(".") or "<root>")


@dataclass
class Checkpoint:
    config: dict
    weights: Dict[str, torch.Tensor]
    phase: str = "end_to_end"
    epoch: int = 0
    optimizer: Optional[dict] = None
    scheduler: Optional[dict] = None
    rng_state: Optional[torch.Tensor] = None
    history: List[dict] = field(default_factory=list)
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def config_hash(self) -> int:
        return stable_hash(self.config)


def _split_optimizer(state: dict):
    arrays = {}
    meta = {"param_groups": state["param_groups"], "state": {}}
    for idx, entries in state["state"].items():
        meta["state"][str(idx)] = sorted(entries)
        for key, value in entries.items():
            arrays[f"optimizer/{idx}/{key}"] = value
    return meta, arrays


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays: Dict[str, torch.Tensor] = {f"weights/{k}": v for k, v in ckpt.weights.items()}
    opt_meta = None
    if ckpt.optimizer is not None:
        opt_meta, opt_arrays = _split_optimizer(ckpt.optimizer)
        arrays.update(opt_arrays)
    directory = []
    chunks = []
    offset = 0
    for name, value in arrays.items():
        t = torch.as_tensor(value).detach().cpu()
        data = t.to(torch.float32).numpy().astype("<f4", copy=False).tobytes(order="C")
        directory.append({"name": name, "dims": list(t.shape), "dtype": str(t.dtype).replace("torch.", ""),
                          "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    header = {
        "phase": ckpt.phase,
        "epoch": ckpt.epoch,
        "config": ckpt.config,
        "arrays": directory,
        "optimizer": opt_meta,
        "scheduler": ckpt.scheduler,
        "rng_state": None if ckpt.rng_state is None else base64.b64encode(
            ckpt.rng_state.numpy().tobytes()).decode(),
        "history": ckpt.history,
        "extra": ckpt.extra,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, ckpt.config_hash, len(head)))
        fh.write(head)
        fh.write(blob)
    os.replace(tmp, path)


def read_header(path) -> tuple:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointFormatError(f"{path}: cannot read ({exc})") from exc
    if len(raw) < _PREFIX.size:
        raise CheckpointTruncatedError(f"{path}: file shorter than the fixed prefix")
    magic, version, chash, head_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(raw) < start + head_len:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(raw[start:start + head_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: header is not valid JSON") from exc
    return chash, header, raw[start + head_len:]


def load_checkpoint(path, expected_config: Optional[dict] = None) -> Checkpoint:
    chash, header, blob = read_header(path)
    if stable_hash(header["config"]) != chash:
        raise CheckpointCorruptError(f"{path}: stored config does not match its hash")
    if expected_config is not None and stable_hash(expected_config) != chash:
        where = first_difference(header["config"], expected_config)
        raise ConfigHashMismatch(f"{path}: config hash mismatch at field '{where}'", where)
    need = sum(a["nbytes"] for a in header["arrays"])
    if len(blob) < need:
        raise CheckpointTruncatedError(f"{path}: expected {need} bytes of array data, found {len(blob)}")
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise CheckpointCorruptError(f"{path}: array data checksum mismatch")
    tensors = {}
    for a in header["arrays"]:
        arr = np.frombuffer(blob, dtype="<f4", count=a["nbytes"] // 4, offset=a["offset"]).reshape(a["dims"])
        t = torch.from_numpy(arr.copy())
        tensors[a["name"]] = t.to(getattr(torch, a["dtype"]))
    weights = {k[len("weights/"):]: v for k, v in tensors.items() if k.startswith("weights/")}
    optimizer = None
    if header["optimizer"] is not None:
        meta = header["optimizer"]
        state = {int(idx): {key: tensors[f"optimizer/{idx}/{key}"] for key in keys}
                 for idx, keys in meta["state"].items()}
        optimizer = {"state": state, "param_groups": meta["param_groups"]}
    rng = None
    if header["rng_state"] is not None:
        rng = torch.from_numpy(np.frombuffer(base64.b64decode(header["rng_state"]), dtype=np.uint8).copy())
    return Checkpoint(header["config"], weights, header["phase"], header["epoch"], optimizer,
                      header["scheduler"], rng, header["history"], header.get("extra", {}))
