"""Shared epoch loop: seeded shuffling, AdamW, warmup+cosine schedule, best-by-validation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .nn import Module
from .optim import LrSchedule, OptimizerState, adamw_step, clip_grad_norm, lr_at
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    warmup_epochs: float = 2
    lr_warmup: float = 1.0e-5
    lr_peak: float = 2.0e-4
    lr_floor: float = 1.0e-6
    weight_decay: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None
    seed: int = 0
    augment: bool = True
    val_fraction: float = 0.1

    def schedule(self) -> LrSchedule:
        # short runs cannot fit the warmup span
        warmup = self.warmup_epochs if self.warmup_epochs < self.epochs else 0
        return LrSchedule(warmup, self.epochs, self.lr_warmup, self.lr_peak, self.lr_floor)


@dataclass
class TrainLog:
    config: dict
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val_loss: float | None = None
    seconds: float = 0.0

    def as_dict(self, with_timing: bool = False) -> dict:
        out = asdict(self)
        if not with_timing:
            out.pop("seconds")
            for e in out["epochs"]:
                e.pop("seconds", None)
        return out


def fit(model: Module, n_train: int, batch_loss: Callable[[np.ndarray, np.random.Generator], Tensor],
        cfg: TrainConfig, val_loss: Callable[[], float] | None = None,
        on_epoch: Callable[[dict], None] | None = None) -> TrainLog:
    """Train ``model`` in place; on return it holds the best-by-validation weights.

    ``batch_loss(indices, rng)`` builds the loss graph for one mini-batch and
    may draw augmentation / dropout randomness from ``rng``.
    """
    if n_train <= 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    schedule = cfg.schedule()
    params = model.parameters()
    state = OptimizerState.for_params(params, weight_decay=cfg.weight_decay,
                                      betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)
    steps_per_epoch = math.ceil(n_train / cfg.batch_size)
    out = TrainLog(config=asdict(cfg))
    best_state = None
    start = time.perf_counter()

    if val_loss is not None:
        v0 = val_loss()
        out.epochs.append({"epoch": 0, "train_loss": None, "val_loss": v0, "lr": None})
        out.best_epoch, out.best_val_loss = 0, v0
        best_state = model.state_dict()

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n_train)
        losses = []
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            lr = lr_at(schedule, epoch + b / steps_per_epoch)
            model.zero_grad()
            try:
                loss = batch_loss(idx, rng)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite activations at epoch {epoch + 1}, step {b}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, step {b}")
            loss.backward()
            if cfg.grad_clip:
                clip_grad_norm(params, cfg.grad_clip)
            adamw_step(params, state, lr)
            losses.append(value * len(idx))
        record = {"epoch": epoch + 1, "train_loss": sum(losses) / n_train,
                  "val_loss": None, "lr": lr, "seconds": time.perf_counter() - t0}
        if val_loss is not None:
            record["val_loss"] = v = val_loss()
            if v < out.best_val_loss:
                out.best_epoch, out.best_val_loss = epoch + 1, v
                best_state = model.state_dict()
        out.epochs.append(record)
        log.info("epoch %d train %.4f val %s", epoch + 1, record["train_loss"], record["val_loss"])
        if on_epoch is not None:
            on_epoch(record)

    model.zero_grad()
    if best_state is not None:
        model.load_state_dict(best_state)
    else:
        out.best_epoch = cfg.epochs
    out.seconds = time.perf_counter() - start
    return out


def evaluate_loss(batch_loss: Callable[[np.ndarray, None], Tensor], n: int, batch_size: int = 32) -> float:
    """Sample-weighted mean loss without dropout or augmentation."""
    total = 0.0
    with no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(n, start + batch_size))
            total += batch_loss(idx, None).item() * len(idx)
    return total / n


def split_validation(groups: list, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Hold out whole groups (e.g. base slices) so all their variants stay together."""
    groups = np.asarray(groups)
    unique = sorted(set(groups.tolist()))
    if fraction <= 0 or len(unique) < 2:
        return np.arange(len(groups)), np.array([], dtype=int)
    rng = np.random.default_rng([seed, 31337])
    n_val = max(1, int(round(fraction * len(unique))))
    held = set(rng.choice(len(unique), size=n_val, replace=False).tolist())
    held_keys = {unique[i] for i in held}
    is_val = np.array([g in held_keys for g in groups.tolist()])
    return np.nonzero(~is_val)[0], np.nonzero(is_val)[0]
