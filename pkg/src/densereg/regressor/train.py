"""Deterministic SGD training for the regressor and the cascade."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from ..codec import LossConfig, QuantizerConfig, encode_field
from .cascade import CascadeModel, heatmap_loss, render_heatmap_targets
from .model import TinyFCN, dense_loss

__all__ = ["TrainConfig", "TrainLog", "TrainingError", "make_batch", "train", "write_loss_csv"]

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """SGD with polynomial learning-rate decay and an optional warm start.

    During the first ``warm_epochs`` epochs the rate is scaled by
    ``warm_factor``. ``balance`` re-weights the cascade heatmap loss each
    epoch so its running mean matches the dense loss. ``clip_norm`` rescales
    the whole gradient when its global L2 norm exceeds the limit.
    """

    seed: int = 0
    epochs: int = 15
    batch_size: int = 1
    lr: float = 0.01
    decay_power: float = 0.9
    warm_epochs: int = 1
    warm_factor: float = 0.1
    momentum: float = 0.9
    clip_norm: float | None = 1.0
    loss: LossConfig = field(default_factory=LossConfig)
    sigma: float = 2.0
    balance: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.lr < 0 or self.warm_factor < 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning rates must be non-negative and momentum in [0, 1)")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive or None")

    def to_dict(self):
        d = dict(self.__dict__)
        d["loss"] = dict(self.loss.__dict__)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["loss"] = LossConfig(**d.get("loss", {}))
        return cls(**d)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # per-epoch means
    batch_totals: list = field(default_factory=list)  # per-epoch lists of batch totals
    heatmap_weights: list = field(default_factory=list)
    batch_dense: list = field(default_factory=list)  # unweighted dense loss per batch, per epoch
    batch_heat: list = field(default_factory=list)  # unweighted heatmap loss per batch, per epoch

    def epoch_medians(self, which="total"):
        src = {"total": self.batch_totals, "dense": self.batch_dense, "heat": self.batch_heat}[which]
        return [float(np.median(b)) for b in src]


def make_batch(samples, K, P=1, with_heatmaps=False, sigma=2.0):
    """Stack samples into training arrays (images scaled to [0, 1])."""
    qc = QuantizerConfig(K, P)
    imgs, keys = [], {k: [] for k in ("mask", "patch", "qh", "qv", "rh", "rv")}
    heat = []
    for s in samples:
        imgs.append(s.image_float() if hasattr(s, "image_float") else np.asarray(s.image, dtype=np.float64))
        t = encode_field(s.field, qc)
        for k in keys:
            keys[k].append(getattr(t, k))
        if with_heatmaps:
            h, w = s.field.mask.shape
            heat.append(render_heatmap_targets(s.landmarks, s.visible, w, h, sigma))
    out = {k: np.stack(v) for k, v in keys.items()}
    out["image"] = np.stack(imgs)
    if with_heatmaps:
        out["heatmap"] = np.stack(heat)
    return out


def _take(data, idx):
    return {k: v[idx] for k, v in data.items()}


def _check(value, epoch, batch):
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch}")


def train(model, data, config: TrainConfig, init=True):
    """Train ``model`` (a :class:`TinyFCN` or :class:`CascadeModel`) in place.

    ``data`` is the dict produced by :func:`make_batch` (with heatmaps for a
    cascade). Returns ``(model, TrainLog)``. The run is a pure function of
    ``(seed, config, data)``: parameters are initialized from the seed when
    ``init`` is true and the batch order is drawn from the same generator.
    """
    n = len(data["image"])
    if n == 0:
        raise ValueError("empty training set")
    is_cascade = isinstance(model, CascadeModel)
    if is_cascade and "heatmap" not in data:
        raise ValueError("cascade training needs heatmap targets")
    rng = np.random.default_rng(config.seed)
    if init:
        model.init(rng)
    params = model.all_params() if is_cascade else model.params
    stage1 = model.stage1 if is_cascade else model
    K = stage1.K
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    n_batches = (n + config.batch_size - 1) // config.batch_size
    total_iters = config.epochs * n_batches
    it = 0
    tlog = TrainLog()
    w_heat = model.heatmap_weight if is_cascade else 0.0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        sums = {"cls": 0.0, "res": 0.0, "heat": 0.0, "total": 0.0}
        totals = []
        dense_raw, heat_raw = [], []
        if is_cascade:
            tlog.heatmap_weights.append(w_heat)
        for b in range(n_batches):
            batch = _take(data, order[b * config.batch_size:(b + 1) * config.batch_size])
            if is_cascade:
                feats, dense, heat, cache = model.forward(batch["image"])
                l_dense, parts, g_dense = dense_loss(dense, batch, K, config.loss)
                l_heat, g_heat = heatmap_loss(heat, batch["heatmap"])
                if config.balance and epoch == 0 and b == 0 and l_heat > 0:
                    w_heat = l_dense / l_heat
                    tlog.heatmap_weights[-1] = w_heat
                wd = model.dense_weight
                total = wd * l_dense + w_heat * l_heat
                _check(total, epoch, b)
                grads = model.backward(cache, wd * g_dense, w_heat * g_heat)
                dense_raw.append(l_dense)
                heat_raw.append(l_heat)
            else:
                _, out, cache = model.forward(batch["image"])
                total, parts, g = dense_loss(out, batch, K, config.loss)
                l_heat = 0.0
                _check(total, epoch, b)
                grads = model.backward(cache, g)
                dense_raw.append(total)
            if config.clip_norm:
                gnorm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
                if gnorm > config.clip_norm:
                    grads = {k: g * (config.clip_norm / gnorm) for k, g in grads.items()}
            frac = it / total_iters
            lr = config.lr * (1.0 - frac) ** config.decay_power
            if epoch < config.warm_epochs:
                lr *= config.warm_factor
            for k, gk in grads.items():
                if config.momentum:
                    velocity[k] = config.momentum * velocity[k] - lr * gk
                    params[k] += velocity[k]
                else:
                    params[k] -= lr * gk
            it += 1
            sums["cls"] += parts["cls"]
            sums["res"] += parts["res"]
            sums["heat"] += l_heat
            sums["total"] += total
            totals.append(total)
        row = {
            "epoch": epoch,
            "cls_loss": sums["cls"] / n_batches,
            "res_loss": sums["res"] / n_batches,
            "heatmap_loss": sums["heat"] / n_batches,
            "total": sums["total"] / n_batches,
        }
        tlog.rows.append(row)
        tlog.batch_totals.append(totals)
        tlog.batch_dense.append(dense_raw)
        tlog.batch_heat.append(heat_raw)
        log.debug("epoch %d total %.6f", epoch, row["total"])
        if is_cascade and config.balance and np.mean(heat_raw) > 0:
            w_heat = float(np.mean(dense_raw) / np.mean(heat_raw))
    if is_cascade:
        model.set_params(params)
        model.heatmap_weight = w_heat
    return model, tlog


def write_loss_csv(fp, tlog: TrainLog):
    w = csv.writer(fp, lineterminator="\n")
    w.writerow(["epoch", "cls_loss", "res_loss", "heatmap_loss", "total"])
    for r in tlog.rows:
        w.writerow([r["epoch"]] + [f"{r[k]:.10g}" for k in ("cls_loss", "res_loss", "heatmap_loss", "total")])
