"""End-to-end training loop, plateau learning-rate decay and checkpoint plumbing."""
from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.optim.lr_scheduler import ReduceLROnPlateau

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .core_types import Split, TileSample
from .ingest import augment
from .losses import LossConfig, total_loss
from .metrics import EvalAccumulator, MetricError, iou_dataset
from .network import CACDN, ModelConfig, batch_inputs, batch_masks

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "lr", "train_loss", "val_loss", "val_iou")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, batch_ids: Sequence[str], breakdown: Dict[str, float]):
        super().__init__(message)
        self.batch_ids = list(batch_ids)
        self.breakdown = breakdown


@dataclass
class TrainSchedule:
    phase: str = "end_to_end"
    epochs: int = 300
    batch_size: int = 4
    lr_init: float = 1e-5
    lr_floor: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 10
    factor: float = 0.5
    min_improvement: float = 1e-5
    augment: bool = True

    def __post_init__(self):
        if self.phase not in ("pretrain", "end_to_end"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.lr_floor > self.lr_init:
            raise ValueError("lr_floor must not exceed lr_init")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0 < self.factor < 1:
            raise ValueError("factor must lie in (0, 1)")

    @classmethod
    def pretrain(cls, **kw) -> "TrainSchedule":
        return cls(**{"phase": "pretrain", "epochs": 50, "lr_init": 1e-4, **kw})


def seed_everything(seed: int, deterministic: bool = False) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    if deterministic:
        torch.use_deterministic_algorithms(True)
        torch.backends.cudnn.benchmark = False


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def augment_seed(seed: int, epoch: int, position: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, position]).generate_state(1)[0])


def make_plateau(optimizer, schedule: TrainSchedule) -> ReduceLROnPlateau:
    # torch decays once num_bad_epochs > patience; ours decays on the patience-th stale epoch
    return ReduceLROnPlateau(optimizer, mode="min", factor=schedule.factor, patience=schedule.patience - 1,
                             threshold=schedule.min_improvement, threshold_mode="abs",
                             min_lr=schedule.lr_floor, eps=0.0)


def make_optimizer(params, schedule: TrainSchedule) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=schedule.lr_init, betas=(schedule.beta1, schedule.beta2),
                            eps=schedule.adam_eps)


def _num_workers() -> int:
    try:
        return max(1, int(os.environ.get("CACDN_NUM_WORKERS", "1")))
    except ValueError:
        return 1


@torch.no_grad()
def validate(model: CACDN, tiles: Sequence[TileSample], loss_cfg: LossConfig,
             batch_size: int = 4) -> Tuple[float, float]:
    """Mean total loss and pooled IoU of ``tiles`` in eval mode."""
    model.eval()
    acc = EvalAccumulator(reservoir_cap=0)
    total = 0.0
    for start in range(0, len(tiles), batch_size):
        batch = tiles[start:start + batch_size]
        inputs = batch_inputs(batch)
        out = model(inputs)
        total += float(total_loss(out, inputs, batch_masks(batch), loss_cfg, model.cfg.use_s2_pre).total) * len(batch)
        for t, prob in zip(batch, out.change_prob.numpy()):
            acc.add(t.id, prob, t.mask)
    try:
        iou = iou_dataset(acc)
    except MetricError:
        iou = float("nan")
    return total / len(tiles), iou


def write_history(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: repr(row[k]) if isinstance(row[k], float) else row[k] for k in HISTORY_FIELDS})


def model_checkpoint(model: CACDN, epoch: int, optimizer=None, scheduler=None, history=(),
                     phase: str = "end_to_end", **extra) -> Checkpoint:
    return Checkpoint(
        config=model.cfg.to_dict(),
        weights={k: v.detach().clone() for k, v in model.state_dict().items()},
        phase=phase,
        epoch=epoch,
        optimizer=None if optimizer is None else optimizer.state_dict(),
        scheduler=None if scheduler is None else scheduler.state_dict(),
        rng_state=torch.get_rng_state(),
        history=list(history),
        extra=extra,
    )


def load_model(path, expected: Optional[ModelConfig] = None) -> Tuple[CACDN, Checkpoint]:
    ckpt = load_checkpoint(path, None if expected is None else expected.to_dict())
    cfg = expected or ModelConfig.from_dict(ckpt.config)
    model = CACDN(cfg)
    model.load_state_dict(ckpt.weights)
    model.eval()
    return model, ckpt


def train_end_to_end(model: CACDN, train_set: Sequence[TileSample], val_set: Sequence[TileSample],
                     schedule: TrainSchedule = TrainSchedule(), loss_cfg: LossConfig = LossConfig(),
                     seed: int = 0, out_dir=None,
                     on_epoch: Optional[Callable[[dict], None]] = None) -> Tuple[CACDN, List[dict]]:
    """Train all branches jointly on the combined loss with plateau decay.

    Per epoch the train tiles are shuffled by ``(seed, epoch)`` and, when
    ``schedule.augment`` is set, augmented with per-position seeds. After each
    epoch the validation loss drives the plateau scheduler. With ``out_dir``
    the last and best-validation checkpoints and ``history.csv`` are written.
    """
    if not train_set:
        raise ValueError("empty training set")
    if not val_set:
        raise ValueError("empty validation set")
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    optimizer = make_optimizer(model.parameters(), schedule)
    plateau = make_plateau(optimizer, schedule)
    use_s2 = model.cfg.use_s2_pre
    history: List[dict] = []
    best = float("inf")
    n = len(train_set)
    pool = ThreadPoolExecutor(_num_workers()) if _num_workers() > 1 else None

    def prepare(epoch, order):
        tiles = [train_set[i] for i in order]
        if not schedule.augment:
            return tiles
        jobs = [(t, augment_seed(seed, epoch, k)) for k, t in enumerate(tiles)]
        fn = lambda job: augment(job[0], job[1]) if job[0].split is Split.TRAIN else job[0]
        return list(pool.map(fn, jobs)) if pool else [fn(j) for j in jobs]

    try:
        for epoch in range(schedule.epochs):
            lr = optimizer.param_groups[0]["lr"]
            tiles = prepare(epoch, epoch_order(seed, epoch, n))
            model.train()
            running, seen = 0.0, 0
            for start in range(0, n, schedule.batch_size):
                batch = tiles[start:start + schedule.batch_size]
                inputs = batch_inputs(batch)
                output = model(inputs)
                loss = total_loss(output, inputs, batch_masks(batch), loss_cfg, use_s2)
                if not torch.isfinite(loss.total):
                    ids = [t.id for t in batch]
                    info = loss.as_floats()
                    if out is not None:
                        with open(out / "diverged.json", "w") as fh:
                            json.dump({"epoch": epoch, "batch_ids": ids, "loss": info}, fh, indent=1)
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch} on batch {ids}: {info}", ids, info)
                optimizer.zero_grad()
                loss.total.backward()
                optimizer.step()
                running += loss.total.item() * len(batch)
                seen += len(batch)
            val_loss, val_iou = validate(model, val_set, loss_cfg, schedule.batch_size)
            plateau.step(val_loss)
            row = {"epoch": epoch, "lr": lr, "train_loss": running / seen, "val_loss": val_loss, "val_iou": val_iou}
            history.append(row)
            log.info("epoch %d lr %.3g train %.5f val %.5f val_iou %.4f", epoch, lr, row["train_loss"],
                     val_loss, val_iou)
            if on_epoch is not None:
                on_epoch(row)
            if out is not None:
                ckpt = model_checkpoint(model, epoch, optimizer, plateau, history,
                                        seed=seed, ablate_s2=not use_s2)
                if val_loss < best:
                    save_checkpoint(ckpt, out / "best.ckpt")
                save_checkpoint(ckpt, out / "last.ckpt")
                write_history(history, out / "history.csv")
            best = min(best, val_loss)
    finally:
        if pool is not None:
            pool.shutdown()
    return model, history
