"""AUPRC, dataset IoU and per-tile mean IoU for binary change maps."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import List, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_RESERVOIR = 2_000_000


class MetricError(ValueError):
    pass


def auprc(scores, labels) -> float:
    """Average precision: ``sum_k (R_k - R_{k-1}) * P_k`` over positive hits.

    Scores are ranked descending with a stable sort, so tied scores keep their
    input order. No interpolation is applied.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise MetricError("AUPRC undefined: labels contain a single class")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, hits.size + 1)
    return float(precision[hits].sum() / n_pos)


@dataclass
class TileRecord:
    id: str
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def union(self) -> int:
        return self.tp + self.fp + self.fn

    @property
    def iou(self) -> float:
        return self.tp / self.union if self.union else float("nan")


class EvalAccumulator:
    """Per-tile confusion counts plus a bounded uniform pixel sample for AUPRC.

    The pixel sample keeps the ``reservoir_cap`` pixels with the smallest
    seeded random keys, which is a uniform sample without replacement that
    does not depend on how tiles are batched.
    """

    def __init__(self, threshold: float = 0.5, reservoir_cap: int = DEFAULT_RESERVOIR, seed: int = 0):
        self.threshold = threshold
        self.cap = reservoir_cap
        self.records: List[TileRecord] = []
        self._rng = np.random.default_rng(seed)
        self._keys = np.empty(0)
        self._scores = np.empty(0, dtype=np.float32)
        self._labels = np.empty(0, dtype=bool)

    def add(self, tile_id: str, prob, mask) -> TileRecord:
        prob = np.asarray(prob, dtype=np.float32)
        gt = np.asarray(mask).astype(bool)
        if prob.shape != gt.shape:
            raise MetricError(f"tile {tile_id}: prob {prob.shape} vs mask {gt.shape}")
        pred = prob >= self.threshold
        rec = TileRecord(
            tile_id,
            tp=int(np.sum(pred & gt)),
            fp=int(np.sum(pred & ~gt)),
            fn=int(np.sum(~pred & gt)),
            tn=int(np.sum(~pred & ~gt)),
        )
        self.records.append(rec)
        self._pool(prob.ravel(), gt.ravel())
        return rec

    def add_counts(self, tile_id: str, tp: int, fp: int, fn: int, tn: int) -> TileRecord:
        rec = TileRecord(tile_id, tp, fp, fn, tn)
        self.records.append(rec)
        return rec

    def _pool(self, scores, labels):
        keys = self._rng.random(scores.size)
        self._keys = np.concatenate([self._keys, keys])
        self._scores = np.concatenate([self._scores, scores])
        self._labels = np.concatenate([self._labels, labels])
        if self._keys.size > self.cap:
            keep = np.argpartition(self._keys, self.cap - 1)[: self.cap]
            keep.sort()
            self._keys, self._scores, self._labels = self._keys[keep], self._scores[keep], self._labels[keep]

    @property
    def scores(self) -> np.ndarray:
        return self._scores

    @property
    def labels(self) -> np.ndarray:
        return self._labels


def iou_dataset(acc: EvalAccumulator) -> float:
    """Pixel-pooled change-class IoU over every tile."""
    tp = sum(r.tp for r in acc.records)
    union = sum(r.union for r in acc.records)
    if union == 0:
        raise MetricError("no change content in evaluation set")
    return tp / union


def mean_iou(acc: EvalAccumulator) -> tuple:
    """Macro average of per-tile change IoU; returns ``(value, n_excluded)``.

    Tiles where both prediction and truth are empty are left out.
    """
    ious = [r.iou for r in acc.records if r.union]
    excluded = len(acc.records) - len(ious)
    if not ious:
        raise MetricError("every tile has an empty union; mean IoU undefined")
    return float(np.mean(ious)), excluded


@dataclass
class MetricReport:
    auprc: float
    iou: float
    mean_iou: float
    n_tiles: int
    n_tiles_excluded: int
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "extra"}
        d.update(self.extra)
        return d


def report(acc: EvalAccumulator, **extra) -> MetricReport:
    miou, excluded = mean_iou(acc)
    try:
        ap = auprc(acc.scores, acc.labels)
    except MetricError:
        log.warning("AUPRC undefined for a single-class evaluation set; reporting nan")
        ap = float("nan")
    return MetricReport(ap, iou_dataset(acc), miou, len(acc.records), excluded, dict(extra))


def write_tile_csv(acc: EvalAccumulator, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "tp", "fp", "fn", "tn", "iou"])
        for r in acc.records:
            w.writerow([r.id, r.tp, r.fp, r.fn, r.tn, "" if not r.union else repr(r.iou)])


def write_report(rep: MetricReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(rep.to_json(), fh, indent=1, sort_keys=True)


def evaluate(predict, tiles: Sequence, threshold: float = 0.5, csv_path=None, batch_size: int = 4,
             reservoir_cap: int = DEFAULT_RESERVOIR, seed: int = 0, **extra) -> MetricReport:
    """Score ``predict`` (a CACDN model, or any callable batch -> ``[B, p, p]`` probs) on ``tiles``."""
    if not tiles:
        raise MetricError("empty evaluation set")
    if any(t.mask is None for t in tiles):
        raise MetricError("every evaluation tile needs a mask")
    acc = EvalAccumulator(threshold, reservoir_cap, seed)
    for start in range(0, len(tiles), batch_size):
        batch = tiles[start:start + batch_size]
        for t, prob in zip(batch, _predict_batch(predict, batch)):
            acc.add(t.id, prob, t.mask)
    if csv_path is not None:
        write_tile_csv(acc, csv_path)
    return report(acc, **extra)


def _predict_batch(predict, batch) -> np.ndarray:
    import torch

    from .network import CACDN, batch_inputs

    if isinstance(predict, CACDN):
        predict.eval()
        with torch.no_grad():
            return predict(batch_inputs(batch)).change_prob.numpy()
    return np.asarray(predict(batch))
