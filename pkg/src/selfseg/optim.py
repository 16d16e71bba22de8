"""Minibatch SGD with momentum, cosine annealing with warm restarts, epochs.

The training step is strictly sequential: forward pass in train mode,
dynamic label generation from the current output, loss/backward, update.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import unet
from .nn import ShapeError
from .selflabel import self_annotation_loss


@dataclass
class TrainConfig:
    lr0: float = 5e-4
    lr_min: float = 1e-4
    momentum: float = 0.5
    batch_size: int = 24
    max_epochs: int = 100
    restart0_epochs: float = 10
    restart_mult: float = 2
    seed: int = 0
    reset_velocity_on_restart: bool = False

    def __post_init__(self):
        if self.lr_min > self.lr0:
            raise ValueError("lr_min must not exceed lr0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.restart0_epochs <= 0:
            raise ValueError("restart0_epochs must be positive")
        if self.restart_mult < 1:
            raise ValueError("restart_mult must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")


@dataclass
class TrainState:
    epoch: int = 0
    iteration: int = 0
    velocities: dict = field(default_factory=dict)
    best_val_loss: float = math.inf
    best_epoch: int = -1
    history: list = field(default_factory=list)

    def meta(self):
        return {
            "epoch": self.epoch,
            "iteration": self.iteration,
            "best_val_loss": self.best_val_loss if math.isfinite(self.best_val_loss) else None,
            "best_epoch": self.best_epoch,
            "history": self.history,
        }

    @classmethod
    def from_meta(cls, meta, velocities=None):
        best = meta.get("best_val_loss")
        return cls(
            epoch=meta["epoch"],
            iteration=meta["iteration"],
            velocities=dict(velocities or {}),
            best_val_loss=math.inf if best is None else best,
            best_epoch=meta["best_epoch"],
            history=list(meta.get("history", [])),
        )


def iterations_per_epoch(d_train, n):
    if d_train < 1 or n < 1:
        raise ValueError("dataset size and batch size must be >= 1")
    return d_train // n + (1 if d_train % n else 0)


def restart_interval(cfg: TrainConfig, epoch_fraction):
    """``(start, length)`` of the annealing interval containing ``epoch_fraction``."""
    if epoch_fraction < 0:
        raise ValueError("epoch_fraction must be non-negative")
    start, length = 0.0, float(cfg.restart0_epochs)
    while epoch_fraction >= start + length:
        start += length
        length *= cfg.restart_mult
    return start, length


def lr_at(cfg: TrainConfig, epoch_fraction):
    start, length = restart_interval(cfg, epoch_fraction)
    x = epoch_fraction - start
    return cfg.lr_min + 0.5 * (cfg.lr0 - cfg.lr_min) * (1.0 + math.cos(math.pi * x / length))


def sgd_momentum_step(params, grads, velocities, lr, momentum):
    """In-place update ``v <- momentum*v + g`` (``v = g`` on the first step), ``p -= lr*v``.

    ``params`` and ``grads`` are name-keyed mappings of arrays; ``velocities``
    is filled on first use.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} != parameter {p.shape}")
        v = velocities.get(name)
        if v is None:
            v = velocities[name] = np.array(g, dtype=p.dtype, copy=True)
        else:
            v *= momentum
            v += g
        p -= lr * v


def select_checkpoint(state: TrainState):
    """Epoch with the lowest mean validation loss (earliest on ties)."""
    vals = [row["mean_val_loss"] for row in state.history
            if row.get("mean_val_loss") is not None]
    if not vals:
        raise ValueError("no validation history to select a checkpoint from")
    epochs = [row["epoch"] for row in state.history if row.get("mean_val_loss") is not None]
    return epochs[int(np.argmin(vals))]


@dataclass
class LabelSpec:
    """How dynamic labels are built: ``"US"`` or ``"SS"`` plus competing channels."""

    mode: str = "US"
    channels: tuple | None = None


def _batches(n, batch_size, order):
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def run_epoch(params, pool, cfg: TrainConfig, state: TrainState, mode="train",
              labels: LabelSpec = None, on_labels=None):
    """One pass over ``pool``; returns the dataset mean of per-image losses.

    In train mode tiles are shuffled with a generator derived from
    ``(seed, epoch)``, parameters are updated once per minibatch and
    ``state.iteration`` advances. Validate mode runs the network in infer mode
    and leaves parameters, velocities and batch-norm statistics untouched.
    ``on_labels(iteration, batch_indices, labels)`` sees every dynamic label batch.
    """
    labels = labels or LabelSpec()
    n = len(pool)
    if n == 0:
        raise ValueError("cannot run an epoch over an empty pool")
    ok, why = unet.check_compat(params.config, *pool.images.shape[1:3])
    if not ok:
        raise ShapeError(why)
    per_image = np.empty(n)
    if mode == "train":
        rng = np.random.default_rng([cfg.seed, state.epoch])
        order = rng.permutation(n)
        t_e = iterations_per_epoch(n, cfg.batch_size)
        trainable = params.trainable()
        for b, idx in enumerate(_batches(n, cfg.batch_size, order)):
            lr = lr_at(cfg, state.epoch + b / t_e)
            x = pool.images[idx][..., None].astype(params.dtype, copy=False)
            y, cache = unet.forward(params, x, mode="train", rng=rng, return_cache=True)
            fixed = None if pool.fixed is None else pool.fixed[idx]
            _, losses, grad, lab = self_annotation_loss(
                y, [pool.maps[i] for i in idx], labels.mode, fixed, labels.channels,
                return_labels=True)
            if on_labels is not None:
                on_labels(state.iteration, idx, lab)
            del y
            grads = unet.backward(params, cache, grad)
            del cache
            sgd_momentum_step(trainable, grads, state.velocities, lr, cfg.momentum)
            state.iteration += 1
            per_image[idx] = losses
    elif mode == "validate":
        for idx in _batches(n, cfg.batch_size, np.arange(n)):
            x = pool.images[idx][..., None].astype(params.dtype, copy=False)
            y = unet.forward(params, x, mode="infer")
            fixed = None if pool.fixed is None else pool.fixed[idx]
            _, losses, _, lab = self_annotation_loss(
                y, [pool.maps[i] for i in idx], labels.mode, fixed, labels.channels,
                return_labels=True)
            if on_labels is not None:
                on_labels(state.iteration, idx, lab)
            per_image[idx] = losses
    else:
        raise ValueError(f"mode must be 'train' or 'validate', got {mode!r}")
    return float(per_image.mean())


def train(params, train_pool, val_pool, cfg: TrainConfig, labels: LabelSpec = None,
          state: TrainState = None, on_epoch_end=None, on_labels=None, log=None, best=None):
    """Run epochs until ``cfg.max_epochs``; returns ``(state, best_params)``.

    After every epoch the validation loss decides whether the current
    parameters become the best ones. ``on_epoch_end(state, params, best_params)``
    is called after the bookkeeping of every epoch (used for checkpointing).
    When resuming, pass the restored ``state`` and the parameters of its best
    epoch as ``best``.
    """
    state = state or TrainState()
    if best is None and state.best_epoch >= 0:
        best = params.copy()
    while state.epoch < cfg.max_epochs:
        e = state.epoch
        if cfg.reset_velocity_on_restart and e > 0:
            start, _ = restart_interval(cfg, e)
            if start == e:
                state.velocities.clear()
        lr = lr_at(cfg, e)
        train_loss = run_epoch(params, train_pool, cfg, state, "train", labels, on_labels)
        val_loss = None
        if val_pool is not None and len(val_pool):
            val_loss = run_epoch(params, val_pool, cfg, state, "validate", labels)
        state.history.append({"epoch": e, "mean_train_loss": train_loss,
                              "mean_val_loss": val_loss, "lr": lr})
        criterion = val_loss if val_loss is not None else train_loss
        if criterion < state.best_val_loss:
            state.best_val_loss = criterion
            state.best_epoch = e
            best = params.copy()
        state.epoch += 1
        if log is not None:
            log(f"epoch {e}: train {train_loss:.6g} val {val_loss if val_loss is None else f'{val_loss:.6g}'} lr {lr:.3g}")
        if on_epoch_end is not None:
            on_epoch_end(state, params, best)
    return state, best if best is not None else params.copy()


LOSS_COLUMNS = ("epoch", "mean_train_loss", "mean_val_loss", "lr")


def write_loss_csv(path, history):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOSS_COLUMNS)
        for row in history:
            writer.writerow([row["epoch"], repr(row["mean_train_loss"]),
                             "" if row["mean_val_loss"] is None else repr(row["mean_val_loss"]),
                             repr(row["lr"])])


def read_loss_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"epoch": int(r["epoch"]),
             "mean_train_loss": float(r["mean_train_loss"]),
             "mean_val_loss": float(r["mean_val_loss"]) if r["mean_val_loss"] else None,
             "lr": float(r["lr"])} for r in rows]
