"""Adam optimisation with a reduce-on-plateau learning-rate schedule."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, backward, no_grad
from .layers import bce_loss
from .unet import UNet
from .weights import ModelWeights, save_weights

log = logging.getLogger(__name__)

HISTORY_HEADER = ("epoch", "train_loss", "val_loss", "lr")


class NonFiniteError(FloatingPointError):
    """A NaN/Inf appeared in a gradient or loss; training was aborted."""


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(weights: "dict[str, Tensor]", grads: "dict[str, np.ndarray | None]", state: AdamState):
    """One bias-corrected Adam update, in place. Parameters with no gradient are skipped."""
    for name, g in grads.items():
        if g is None:
            continue
        if g.shape != weights[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {weights[name].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError(f"non-finite gradient in {name} ({bad} entries) at step {state.t + 1}")
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, g in grads.items():
        if g is None:
            continue
        w = weights[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w.data)
            state.v[name] = np.zeros_like(w.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        w.data = (w.data - state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(w.dtype)
    return weights, state


@dataclass
class PlateauScheduler:
    lr: float = 1e-4
    patience: int = 4
    decay_factor: float = 0.1
    min_lr: float = 1e-7
    threshold: float = 1e-4
    best: float = math.inf
    epochs_since_improve: int = 0

    def step(self, val_loss: float) -> float:
        if not math.isfinite(val_loss):
            raise NonFiniteError(f"validation loss is not finite: {val_loss}")
        if val_loss < self.best - self.threshold:
            self.best = val_loss
            self.epochs_since_improve = 0
            return self.lr
        self.epochs_since_improve += 1
        if self.epochs_since_improve > self.patience:
            self.lr = max(self.lr * self.decay_factor, self.min_lr)
            self.epochs_since_improve = 0
        return self.lr


def scheduler_step(s: PlateauScheduler, val_loss: float) -> float:
    return s.step(val_loss)


@dataclass
class TrainRunConfig:
    max_epochs: int = 50
    batch_size: int = 4
    initial_lr: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0  # epochs between periodic checkpoints; 0 disables
    early_stop: bool = False
    early_stop_patience: int = 10
    patience: int = 4
    decay_factor: float = 0.1
    min_lr: float = 1e-7
    threshold: float = 1e-4

    def validate(self, n_train: int) -> None:
        for name in ("max_epochs", "batch_size", "initial_lr", "patience", "early_stop_patience"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size > n_train:
            raise ValueError(f"batch_size {self.batch_size} exceeds training set size {n_train}")


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> list:
    """Shuffled batches; a singleton tail is merged into the previous batch."""
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def train_epoch(model: UNet, images: np.ndarray, masks: np.ndarray, state: AdamState, rng, batch_size: int = 4) -> float:
    """One shuffled pass; returns the mean pixel BCE over the epoch."""
    if len(images) == 0:
        raise ValueError("training set is empty")
    model.train()
    total, count = 0.0, 0
    for idx in batch_indices(len(images), batch_size, rng):
        model.zero_grad()
        loss = bce_loss(model.logits(images[idx]), masks[idx])
        lv = float(loss.data)
        if not math.isfinite(lv):
            raise NonFiniteError(f"loss became {lv} at optimizer step {state.t + 1}")
        backward(loss)
        adam_step(model.params, {k: p.grad for k, p in model.params.items()}, state)
        total += lv * len(idx)
        count += len(idx)
    model.zero_grad()
    return total / count


def evaluate_loss(model: UNet, images: np.ndarray, masks: np.ndarray, batch_size: int = 4) -> float:
    probs_loss, count = 0.0, 0
    prev = model.mode
    model.eval()
    with no_grad():
        for i in range(0, len(images), batch_size):
            loss = bce_loss(model.logits(images[i : i + batch_size]), masks[i : i + batch_size])
            n = len(images[i : i + batch_size])
            probs_loss += float(loss.data) * n
            count += n
    if prev == "train":
        model.train()
    return probs_loss / count


@dataclass
class FitResult:
    best: ModelWeights
    best_epoch: int
    best_val_loss: float
    final: ModelWeights
    history: list  # rows of (epoch, train_loss, val_loss, lr)


def fit(model: UNet, train_set, val_set, cfg: TrainRunConfig, checkpoint_dir=None) -> FitResult:
    """Train for up to ``cfg.max_epochs`` epochs, keeping the lowest-val-loss weights."""
    xtr, ytr = train_set
    xva, yva = val_set
    if len(xtr) == 0 or len(xva) == 0:
        raise ValueError("train and validation sets must be non-empty")
    cfg.validate(len(xtr))
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    adam = AdamState(lr=cfg.initial_lr)
    sched = PlateauScheduler(
        lr=cfg.initial_lr, patience=cfg.patience, decay_factor=cfg.decay_factor, min_lr=cfg.min_lr, threshold=cfg.threshold
    )
    history = []
    best, best_epoch, best_val = None, 0, math.inf
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        lr = adam.lr
        train_loss = train_epoch(model, xtr, ytr, adam, rng, cfg.batch_size)
        val_loss = evaluate_loss(model, xva, yva, cfg.batch_size)
        history.append((epoch, train_loss, val_loss, lr))
        log.info("epoch %d train %.6g val %.6g lr %.3g", epoch, train_loss, val_loss, lr)
        if val_loss < best_val:
            best_val, best_epoch = val_loss, epoch
            best = ModelWeights.from_model(model)
            stale = 0
        else:
            stale += 1
        adam.lr = sched.step(val_loss)
        if checkpoint_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_weights(model, os.path.join(checkpoint_dir, f"epoch_{epoch:03d}.csegw"))
        if cfg.early_stop and stale >= cfg.early_stop_patience:
            log.info("early stop after %d epochs without improvement", stale)
            break
    return FitResult(best, best_epoch, best_val, ModelWeights.from_model(model), history)


def history_csv(history, header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_HEADER)
    for epoch, tr, va, lr in history:
        w.writerow([epoch, f"{tr:.6g}", f"{va:.6g}", f"{lr:.6g}"])
    return buf.getvalue()
