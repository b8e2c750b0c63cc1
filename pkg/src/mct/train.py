"""Training, pretraining and inference loops."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import functional as F
from .data import GroundTruth, HsiCube, extract_patches, labels_at, pretrain_batches
from .metrics import ConfusionMatrix
from .model import MCT
from .nn import EVAL, Context
from .optim import Adam, cosine_lr
from .pretrain import CMPP, pretrain_params, pretrain_step, reconstruction_loss
from .tensor import Tape, no_grad
from .transformer import predict

log = logging.getLogger(__name__)


@dataclass
class Schedule:
    epochs: int = 300
    batch: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    # pretraining only: batches per epoch (None = one pass over the scene's pixel count)
    batches_per_epoch: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def fit(model: MCT, cube: HsiCube, positions: Sequence[tuple[int, int]], labels: np.ndarray,
        schedule: Schedule, seed: int = 0, max_steps: int | None = None) -> list[dict]:
    """Supervised training with cross-entropy; ``labels`` are 1-based.

    Returns one log row per step. Batch order is keyed by (seed, epoch).
    """
    pos = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    y = np.asarray(labels, dtype=np.int64) - 1
    n = len(pos)
    if n == 0:
        raise ValueError("no training positions")
    patches = extract_patches(cube, pos, model.cfg.mce.patch)
    batch = min(schedule.batch, n)
    per_epoch = math.ceil(n / batch)
    total = schedule.epochs * per_epoch
    if max_steps is not None:
        total = min(total, max_steps)
    opt = Adam(model.parameters(), lr=schedule.lr, weight_decay=schedule.weight_decay)
    rows = []
    step = 0
    for epoch in range(schedule.epochs):
        order = np.random.default_rng([seed, epoch, 7]).permutation(n)
        for b in range(per_epoch):
            if step >= total:
                return rows
            idx = order[b * batch:(b + 1) * batch]
            ctx = Context(training=True, seed=seed, step=step)
            lr = cosine_lr(schedule.lr, step, total)
            opt.zero_grad()
            with Tape() as tape:
                logits = model(patches[idx], ctx)
                loss = F.cross_entropy(logits, y[idx])
            tape.backward(loss)
            opt.step(lr)
            acc = float((predict(logits) == y[idx]).mean())
            rows.append({"step": step, "epoch": epoch, "lr": lr, "loss": loss.item(), "batch_acc": acc})
            step += 1
    return rows


def predict_positions(model: MCT, cube: HsiCube, positions: Sequence[tuple[int, int]],
                      batch: int = 256) -> np.ndarray:
    """1-based class predictions in eval mode."""
    pos = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    out = np.zeros(len(pos), dtype=np.int64)
    with no_grad():
        for i in range(0, len(pos), batch):
            chunk = extract_patches(cube, pos[i:i + batch], model.cfg.mce.patch)
            out[i:i + batch] = predict(model(chunk, EVAL)) + 1
    return out


def evaluate(model: MCT, cube: HsiCube, gt: GroundTruth, positions: Sequence[tuple[int, int]],
             batch: int = 256) -> ConfusionMatrix:
    pred = predict_positions(model, cube, positions, batch)
    return ConfusionMatrix(gt.n_classes).update(labels_at(gt, positions), pred)


def predict_scene(model: MCT, cube: HsiCube, mask: np.ndarray | None = None, batch: int = 256) -> np.ndarray:
    """H x W map of 1-based predictions; positions where ``mask`` is 0 stay 0."""
    h, w = cube.height, cube.width
    if mask is None:
        rows, cols = np.divmod(np.arange(h * w), w)
    else:
        rows, cols = np.nonzero(np.asarray(mask))
    pos = np.stack([rows, cols], axis=1)
    out = np.zeros((h, w), dtype=np.int64)
    out[rows, cols] = predict_positions(model, cube, pos, batch)
    return out


def pretrain(model: MCT, cmpp: CMPP, cube: HsiCube, schedule: Schedule, seed: int = 0,
             zero_center: bool = False, max_steps: int | None = None) -> list[dict]:
    """Center-mask pretraining on uniformly drawn, unlabeled scene patches."""
    per_epoch = schedule.batches_per_epoch or max(1, (cube.height * cube.width) // schedule.batch)
    total = schedule.epochs * per_epoch
    if max_steps is not None:
        total = min(total, max_steps)
    opt = Adam(pretrain_params(model, cmpp), lr=schedule.lr, weight_decay=schedule.weight_decay)
    rows = []
    step = 0
    for epoch in range(schedule.epochs):
        for patches in pretrain_batches(cube, model.cfg.mce.patch, schedule.batch, seed, epoch, per_epoch):
            if step >= total:
                return rows
            ctx = Context(training=True, seed=seed, step=step)
            lr = cosine_lr(schedule.lr, step, total)
            loss = pretrain_step(patches, model, cmpp, opt, ctx, lr=lr, zero_center=zero_center)
            if not np.isfinite(loss):
                raise FloatingPointError(f"pretraining loss became {loss} at step {step}")
            rows.append({"step": step, "epoch": epoch, "lr": lr, "loss": loss})
            step += 1
    return rows


def reconstruction_mse(model: MCT, cmpp: CMPP, cube: HsiCube, positions, batch: int = 256,
                       zero_center: bool = False) -> float:
    """Mean held-out reconstruction MSE in eval mode."""
    pos = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    total, n = 0.0, 0
    with no_grad():
        for i in range(0, len(pos), batch):
            chunk = extract_patches(cube, pos[i:i + batch], model.cfg.mce.patch)
            total += reconstruction_loss(chunk, model, cmpp, EVAL, zero_center).item() * len(chunk)
            n += len(chunk)
    return total / n


def mean_predictor_mse(cube: HsiCube, positions) -> float:
    """MSE of predicting every center spectrum by the per-band scene mean."""
    pos = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
    spectra = cube.values[pos[:, 0], pos[:, 1]].astype(np.float64)
    mean = cube.values.reshape(-1, cube.bands).mean(axis=0)
    return float(((spectra - mean) ** 2).mean())
