"""Adam with linear warmup, early stopping, and the training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, TrainingError
from .tensor import Array, GradientTape, Tensor, mean_of

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 3e-4
    warmup_steps: int = 500
    batch_size: int = 64
    max_epochs: int = 100
    early_stop_patience: int = 5
    seed: int = 0
    grad_clip_norm: Optional[float] = None

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigurationError(f"base_lr must be positive, got {self.base_lr}")
        for name in ("warmup_steps", "batch_size", "max_epochs", "early_stop_patience"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.grad_clip_norm is not None and self.grad_clip_norm <= 0:
            raise ConfigurationError("grad_clip_norm must be positive when set")


def lr_at_step(step: int, config: TrainConfig) -> float:
    """Linear ramp from ~0 to base_lr over the warmup, constant after."""
    if step < 1:
        raise ContractError(f"step counter starts at 1, got {step}")
    if step <= config.warmup_steps:
        return config.base_lr * step / config.warmup_steps
    return config.base_lr


@dataclass
class OptimizerState:
    """First/second moment accumulators and the shared step counter."""

    m: dict
    v: dict
    step: int = 0

    @classmethod
    def for_parameters(cls, parameters: Mapping[str, Tensor]) -> "OptimizerState":
        return cls(m={p: np.zeros_like(t.data) for p, t in parameters.items()},
                   v={p: np.zeros_like(t.data) for p, t in parameters.items()})


def adam_step(parameters: Mapping[str, Tensor], grads: Mapping[str, Array],
              state: OptimizerState, lr: float) -> None:
    """One bias-corrected Adam update; rebinds each parameter's data array."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - ADAM_BETA1 ** t
    bc2 = 1.0 - ADAM_BETA2 ** t
    for path, param in parameters.items():
        g = np.asarray(grads[path], dtype=np.float64)
        if g.shape != param.data.shape:
            raise TrainingError(f"gradient shape {g.shape} does not match parameter "
                                f"{path!r} shape {param.data.shape}")
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {path!r}")
        m = state.m[path] = ADAM_BETA1 * state.m[path] + (1.0 - ADAM_BETA1) * g
        v = state.v[path] = ADAM_BETA2 * state.v[path] + (1.0 - ADAM_BETA2) * (g * g)
        param.data = param.data - lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)


def clip_gradients(grads: Mapping[str, Array], max_norm: float) -> dict[str, Array]:
    """Scale all gradients down if their joint L2 norm exceeds ``max_norm``."""
    total = math.sqrt(sum(float((np.asarray(g) ** 2).sum()) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return dict(grads)
    scale = max_norm / total
    return {p: np.asarray(g) * scale for p, g in grads.items()}


def split_dataset(records: Sequence, fractions: Sequence[float],
                  seed: int) -> tuple[list, list, list]:
    """Seeded shuffle then contiguous split; floors go to earlier splits.

    ``fractions`` has two (train/val) or three (train/val/test) entries
    summing to 1; with two entries the returned test list is empty.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) not in (2, 3):
        raise ConfigurationError(f"need 2 or 3 split fractions, got {len(fractions)}")
    if any(f <= 0 for f in fractions):
        raise ConfigurationError(f"split fractions must be positive: {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must sum to 1, got {sum(fractions)}")
    if len(records) < len(fractions):
        raise ConfigurationError(f"cannot split {len(records)} records into "
                                 f"{len(fractions)} non-empty parts")
    order = np.random.default_rng(seed).permutation(len(records))
    counts = [int(math.floor(f * len(records))) for f in fractions]
    remainder = len(records) - sum(counts)
    for i in range(remainder):
        counts[i % len(counts)] += 1
    splits: list[list] = []
    start = 0
    for count in counts:
        splits.append([records[i] for i in order[start:start + count]])
        start += count
    while len(splits) < 3:
        splits.append([])
    return splits[0], splits[1], splits[2]


class EarlyStopper:
    """Stop after ``patience`` consecutive epochs without a strict
    validation-loss improvement."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ConfigurationError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def update(self, val_loss: float) -> bool:
        """Record one epoch's validation loss; True means stop now."""
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


@dataclass
class FitResult:
    history: list
    best_state: dict
    best_val_loss: float
    best_epoch: int
    epochs_run: int
    diverged: bool = False


def evaluate_split(model, records: Sequence) -> tuple[float, float]:
    """(mean per-sample loss, pooled token accuracy) without recording."""
    if not records:
        raise ConfigurationError("cannot evaluate an empty split")
    loss_sum = 0.0
    correct = 0
    total = 0
    for rec in records:
        loss, c, t = model.loss_for_record(rec)
        loss_sum += loss.item()
        correct += c
        total += t
    return loss_sum / len(records), correct / max(1, total)


def fit(model, train_set: Sequence, val_set: Sequence, config: TrainConfig) -> FitResult:
    """Mini-batch Adam training with warmup and early stopping.

    Loss spikes to non-finite values abort the run and restore the best
    checkpoint seen so far; the model is always left holding the
    best-validation parameters when fit returns.
    """
    if not train_set or not val_set:
        raise ConfigurationError("fit needs non-empty train and validation sets")
    parameters = model.parameters()
    state = OptimizerState.for_parameters(parameters)
    stopper = EarlyStopper(config.early_stop_patience)
    rng = np.random.default_rng(config.seed)

    best_state = model.state_dict()
    best_val_loss = math.inf
    best_epoch = 0
    history: list[dict] = []
    step = 0
    epochs_run = 0

    for epoch in range(1, config.max_epochs + 1):
        epochs_run = epoch
        order = rng.permutation(len(train_set))
        loss_weighted = 0.0
        correct = 0
        total = 0
        last_lr = lr_at_step(max(1, step), config) if step else 0.0
        diverged = False
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            with GradientTape() as tape:
                losses = []
                for i in batch:
                    loss, c, t = model.loss_for_record(train_set[i])
                    losses.append(loss)
                    correct += c
                    total += t
                batch_loss = mean_of(losses)
            value = batch_loss.item()
            if not math.isfinite(value):
                diverged = True
                break
            loss_weighted += value * len(batch)
            tape.backward(batch_loss)
            grads = tape.gradients(parameters)
            if config.grad_clip_norm is not None:
                grads = clip_gradients(grads, config.grad_clip_norm)
            step += 1
            last_lr = lr_at_step(step, config)
            adam_step(parameters, grads, state, last_lr)
        if diverged:
            model.load_state_dict(best_state)
            return FitResult(history, best_state, best_val_loss,
                             best_epoch, epochs_run, diverged=True)

        val_loss, val_acc = evaluate_split(model, val_set)
        history.append({
            "epoch": epoch,
            "train_loss": loss_weighted / len(train_set),
            "train_acc": correct / max(1, total),
            "val_loss": val_loss,
            "val_acc": val_acc,
            "lr": last_lr,
        })
        if val_loss < best_val_loss:
            best_val_loss = val_loss
            best_state = model.state_dict()
            best_epoch = epoch
        if stopper.update(val_loss):
            break

    model.load_state_dict(best_state)
    return FitResult(history, best_state, best_val_loss, best_epoch, epochs_run)
