"""Command-line entry point: ``cacdn {synth,tile,pretrain,train,eval,predict}``.

Every command writes into its ``--out`` directory: the resolved configuration
(``config.json``), a line-delimited JSON log (``log.jsonl``) and its outputs.
On failure the last line on stderr is a JSON object ``{"error": <class>, ...}``
and the exit code is nonzero.
"""
from __future__ import annotations

import argparse
import dataclasses
import enum
import json
import logging
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import torch
from PIL import Image

from .checkpoint import save_checkpoint
from .container import MANIFEST, load_sample, load_scene, load_tiles, save_tiles, write_grid
from .core_types import SENTINEL_MODALITIES, Modality, Split
from .foundation import Autoencoder, PretrainSchedule, ReconstructionLossWeights, pretrain
from .ingest import Manifest, NormalizationSpec, build_manifest, carve_validation, check_tiles, normalize, tile_scene
from .losses import LossConfig
from .metrics import evaluate, write_report
from .network import (CACDN, ConfigError, ModelConfig, autoencoder_checkpoint, config_hash, forward,
                      load_pretrained_branches, predict_mask)
from .synthgen import SynthConfig, assign_splits, generate_dataset, generate_scene
from .trainer import TrainSchedule, load_model, seed_everything, train_end_to_end

log = logging.getLogger("cacdn")

CONFIG_ECHO = "config.json"
LOG_FILE = "log.jsonl"


@dataclasses.dataclass
class DataConfig:
    root: Optional[str] = None
    normalization: NormalizationSpec = dataclasses.field(default_factory=NormalizationSpec)
    split_fractions: List[float] = dataclasses.field(default_factory=lambda: [0.8, 0.1, 0.1])
    val_fraction: float = 0.1
    stride: Optional[int] = None


@dataclasses.dataclass
class RunConfig:
    model: ModelConfig = dataclasses.field(default_factory=lambda: ModelConfig("small"))
    loss: LossConfig = dataclasses.field(default_factory=LossConfig)
    schedule: TrainSchedule = dataclasses.field(default_factory=TrainSchedule)
    pretrain: PretrainSchedule = dataclasses.field(default_factory=PretrainSchedule)
    recon_weights: ReconstructionLossWeights = dataclasses.field(default_factory=ReconstructionLossWeights)
    synth: SynthConfig = dataclasses.field(default_factory=SynthConfig)
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    threshold: float = 0.5
    seed: int = 0
    deterministic: bool = False

    def to_dict(self) -> dict:
        d = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            d[f.name] = _plain(v)
        return d


def _plain(v):
    if hasattr(v, "to_dict"):
        return v.to_dict()
    if dataclasses.is_dataclass(v):
        return {f.name: _plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, enum.Enum):
        return v.value
    return v


def _check_keys(d: Mapping, cls, path: str) -> None:
    if not isinstance(d, Mapping):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(d).__name__}")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key '{(path + '.' if path else '') + unknown[0]}'")


def _build(cls, d: Mapping, path: str):
    _check_keys(d, cls, path)
    try:
        if cls is ModelConfig:
            return ModelConfig.from_dict({"variant": "small", **d})
        if cls is PretrainSchedule and "betas" in d:
            d = {**d, "betas": tuple(d["betas"])}
        if cls is DataConfig:
            norm = d.get("normalization", {})
            _check_keys(norm, NormalizationSpec, f"{path}.normalization")
            return DataConfig(**{**d, "normalization": NormalizationSpec(**norm)})
        return cls(**d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def parse_run_config(doc: Mapping) -> RunConfig:
    """Build a :class:`RunConfig`, rejecting unknown keys at every level."""
    _check_keys(doc, RunConfig, "")
    kwargs: Dict[str, Any] = {}
    for f in dataclasses.fields(RunConfig):
        if f.name not in doc:
            continue
        value = doc[f.name]
        if f.name in ("threshold", "seed", "deterministic"):
            kwargs[f.name] = value
        else:
            kwargs[f.name] = _build(_SECTION_TYPES[f.name], value, f.name)
    return RunConfig(**kwargs)


_SECTION_TYPES = {
    "model": ModelConfig,
    "loss": LossConfig,
    "schedule": TrainSchedule,
    "pretrain": PretrainSchedule,
    "recon_weights": ReconstructionLossWeights,
    "synth": SynthConfig,
    "data": DataConfig,
}


def load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_run_config(doc)


class JsonLinesFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        entry = {"time": round(record.created, 3), "level": record.levelname, "logger": record.name,
                 "message": record.getMessage()}
        if record.exc_info:
            entry["exc"] = self.formatException(record.exc_info)
        return json.dumps(entry)


def _setup_logging(out: Path, verbose: bool) -> List[logging.Handler]:
    root = logging.getLogger()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    handlers = [logging.FileHandler(out / LOG_FILE), logging.StreamHandler(sys.stderr)]
    for h in handlers:
        h.setFormatter(JsonLinesFormatter())
        root.addHandler(h)
    return handlers


def _load_split(data_root: Path, manifest: Manifest, split: Split):
    ids = manifest.ids(split)
    tiles = load_tiles(data_root, ids)
    check_tiles(tiles)
    return tiles


def _data_root(args, cfg: RunConfig) -> Path:
    root = getattr(args, "data", None) or cfg.data.root
    if root is None:
        raise ConfigError("no data directory (use --data or data.root)")
    return Path(root)


def cmd_synth(args, cfg: RunConfig, out: Path) -> dict:
    synth = cfg.synth
    manifest = generate_dataset(synth, out, cfg.data.split_fractions, cfg.data.normalization)
    if args.raw_scenes:
        from .container import save_scene

        for i in range(synth.n_scenes):
            save_scene(generate_scene(synth, i).scene, out / "scenes" / f"scene_{i:03d}")
    return {"tiles": len(manifest.train) + len(manifest.val) + len(manifest.test)}


def cmd_tile(args, cfg: RunConfig, out: Path) -> dict:
    scene_root = Path(args.scene_dir)
    dirs = sorted(p for p in scene_root.iterdir() if (p / "scene.json").exists())
    if not dirs:
        raise FileNotFoundError(f"{scene_root}: no scene directories with scene.json")
    tiles, override = [], {}
    for d in dirs:
        scene = normalize(load_scene(d), cfg.data.normalization)
        cut = tile_scene(scene, cfg.model.p, cfg.data.stride)
        if scene.split_hint is not None:
            override.update({t.id: scene.split_hint.value for t in cut})
        tiles.extend(cut)
    check_tiles(tiles)
    manifest = build_manifest(tiles, cfg.data.split_fractions, override=override)
    save_tiles(assign_splits(tiles, manifest), out, provenance={"source": "tile", "scenes": [d.name for d in dirs]})
    manifest.save(out / MANIFEST)
    return {"tiles": len(tiles), "scenes": len(dirs)}


def cmd_pretrain(args, cfg: RunConfig, out: Path) -> dict:
    root = _data_root(args, cfg)
    manifest = Manifest.load(root / MANIFEST)
    tiles = _load_split(root, manifest, Split.TRAIN)
    modalities = SENTINEL_MODALITIES if args.modality == "all" else (Modality(args.modality),)
    result = {}
    for m in modalities:
        seed_everything(cfg.seed, cfg.deterministic)
        ae = Autoencoder(cfg.model.autoencoder_cfgs[m.value])
        grids = np.stack([t.grid(m) for t in tiles])
        _, history = pretrain(ae, grids, cfg.pretrain, seed=cfg.seed, weights=cfg.recon_weights,
                              on_epoch=lambda e, l: log.info("pretrain %s epoch %d loss %.6f", m.value, e, l))
        path = out / f"{m.value}.ckpt"
        save_checkpoint(autoencoder_checkpoint(ae, m, cfg.pretrain.epochs - 1,
                                               [{"epoch": i, "loss": v} for i, v in enumerate(history)]), path)
        result[m.value] = {"initial_loss": history[0], "final_loss": history[-1]}
    return result


def cmd_train(args, cfg: RunConfig, out: Path) -> dict:
    root = _data_root(args, cfg)
    model_cfg = dataclasses.replace(cfg.model, use_s2_pre=not args.ablate_s2)
    seed_everything(cfg.seed, cfg.deterministic)
    model = CACDN(model_cfg)
    if args.from_scratch:
        log.info("training from scratch, no pretrained branches")
    elif args.pretrained_dir is None:
        raise ConfigError("--pretrained-dir is required unless --from-scratch is given")
    else:
        pdir = Path(args.pretrained_dir)
        load_pretrained_branches(model, {m: pdir / f"{m.value}.ckpt" for m in model_cfg.active_modalities})
    manifest = carve_validation(Manifest.load(root / MANIFEST), cfg.data.val_fraction)
    train = _load_split(root, manifest, Split.TRAIN)
    val = _load_split(root, manifest, Split.VAL)
    _, history = train_end_to_end(model, train, val, cfg.schedule, cfg.loss, seed=cfg.seed, out_dir=out)
    return {"epochs": len(history), "final_val_loss": history[-1]["val_loss"], "ablate_s2": args.ablate_s2}


def cmd_eval(args, cfg: RunConfig, out: Path) -> dict:
    root = _data_root(args, cfg)
    manifest = Manifest.load(root / MANIFEST)
    tiles = _load_split(root, manifest, Split(args.split))
    extra = {"split": args.split}
    if args.oracle:
        predict = lambda batch: np.stack([t.mask.astype(np.float32) for t in batch])
        extra.update(ablate_s2=None, config_hash=None, predictor="oracle")
    else:
        model, ckpt = load_model(args.checkpoint)
        predict = model
        extra.update(ablate_s2=not model.cfg.use_s2_pre, config_hash=f"{config_hash(model.cfg):016x}",
                     checkpoint_epoch=ckpt.epoch)
    rep = evaluate(predict, tiles, cfg.threshold, csv_path=out / "tiles.csv", seed=cfg.seed, **extra)
    write_report(rep, out / "report.json")
    return rep.to_json()


def _png(grid: np.ndarray, path: Path) -> None:
    Image.fromarray(np.clip(np.rint(grid * 255.0), 0, 255).astype(np.uint8), mode="L").save(path)


def cmd_predict(args, cfg: RunConfig, out: Path) -> dict:
    model, _ = load_model(args.checkpoint)
    sample = load_sample(args.input)
    with torch.no_grad():
        prob = forward(model, sample).change_prob.numpy()
    mask = predict_mask(prob, cfg.threshold)
    write_grid(out / "prob.bin", prob)
    write_grid(out / "mask.bin", mask, mask=True)
    _png(prob, out / "prob.png")
    _png(mask.astype(np.float64), out / "mask.png")
    return {"id": sample.id, "changed_pixels": int(mask.sum())}


COMMANDS = {
    "synth": cmd_synth,
    "tile": cmd_tile,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cacdn", description="Context-aware change detection pipeline.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file (defaults for every omitted field)")
    common.add_argument("--out", required=True, help="run directory; all outputs go here")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--deterministic", action="store_true", help="bitwise-reproducible mode")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic tile dataset")
    p.add_argument("--raw-scenes", action="store_true", help="also write raw scenes for the tile command")

    p = sub.add_parser("tile", parents=[common], help="normalize and tile raw scenes")
    p.add_argument("--scene-dir", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="pretrain one foundation autoencoder")
    p.add_argument("--data")
    p.add_argument("--modality", required=True, choices=[m.value for m in SENTINEL_MODALITIES] + ["all"])

    p = sub.add_parser("train", parents=[common], help="end-to-end training")
    p.add_argument("--data")
    p.add_argument("--pretrained-dir")
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--ablate-s2", action="store_true", help="drop the pre-event optical branch")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a split")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test", choices=[s.value for s in Split])
    p.add_argument("--oracle", action="store_true", help="score the ground-truth masks themselves")

    p = sub.add_parser("predict", parents=[common], help="predict one tile")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="tile directory (sample.json + grids)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    handlers: List[logging.Handler] = []
    try:
        if args.command == "eval" and not args.oracle and not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --oracle")
        cfg = load_run_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.synth = dataclasses.replace(cfg.synth, seed=args.seed)
        if args.deterministic:
            cfg.deterministic = True
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / CONFIG_ECHO, "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
        handlers = _setup_logging(out, args.verbose)
        seed_everything(cfg.seed, cfg.deterministic)
        start = time.time()
        log.info("command %s started", args.command)
        result = COMMANDS[args.command](args, cfg, out)
        log.info("command %s finished in %.1fs: %s", args.command, time.time() - start,
                 json.dumps(result, sort_keys=True, default=str))
        return 0
    except Exception as exc:  # noqa: BLE001 - every failure becomes one machine-readable line
        log.debug("failure", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    finally:
        for h in handlers:
            logging.getLogger().removeHandler(h)
            h.close()


if __name__ == "__main__":
    sys.exit(main())
