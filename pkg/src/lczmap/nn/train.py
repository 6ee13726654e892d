"""Minibatch training loop with validation-loss early stopping."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Optional

import numpy as np

from ..errors import ConfigError, TrainingDivergenceError
from .layers import softmax_cross_entropy
from .model import Mscnn
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 96
    max_epochs: int = 500
    early_stop_patience: int = 15
    early_stopping: bool = True
    learning_rate: float = 0.002
    decay: float = 0.004
    decay_mode: str = "lr"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    gradient_check: bool = False
    # stop as soon as an epoch's running train accuracy reaches this value
    target_train_accuracy: Optional[float] = None

    def __post_init__(self):
        if self.batch_size < 1 or self.early_stop_patience < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size, max_epochs and early_stop_patience must be >= 1")
        if self.decay_mode not in ("lr", "weight"):
            raise ConfigError(f"decay_mode must be 'lr' or 'weight', got {self.decay_mode!r}")

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def adam(self, params) -> AdamState:
        return AdamState.for_params(
            params, lr=self.learning_rate, decay=self.decay, beta1=self.beta1,
            beta2=self.beta2, eps=self.eps, decay_mode=self.decay_mode,
        )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    learning_rate: float


@dataclass
class History:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def val_losses(self) -> list[float]:
        return [e.val_loss for e in self.epochs]

    @property
    def train_accuracies(self) -> list[float]:
        return [e.train_accuracy for e in self.epochs]

    def to_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
            "epochs": [asdict(e) for e in self.epochs],
        }


def evaluate(model: Mscnn, ds, batch_size: int = 128) -> tuple[float, float]:
    """Eval-mode mean cross-entropy and accuracy over a sample set."""
    total_loss, correct = 0.0, 0
    for s in range(0, len(ds), batch_size):
        logits, _ = model.forward(ds.patches[s:s + batch_size], mode="eval")
        y = ds.labels[s:s + batch_size]
        loss, _ = softmax_cross_entropy(logits, y)
        total_loss += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return total_loss / len(ds), correct / len(ds)


class EarlyStopping:
    """Tracks the best validation loss; signals a stop after ``patience`` misses."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.misses = 0

    def update(self, epoch: int, val_loss: float) -> tuple[bool, bool]:
        """Return ``(improved, should_stop)``."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.misses = val_loss, epoch, 0
            return True, False
        self.misses += 1
        return False, self.misses >= self.patience


def batch_bounds(n: int, batch_size: int) -> list[tuple[int, int]]:
    """Minibatch ``(start, stop)`` pairs; the last batch may be partial.

    A lone trailing sample joins the batch before it, since batch norm needs
    two samples for train-mode statistics.
    """
    if n < 2:
        raise ValueError("training needs at least 2 samples (batch norm statistics)")
    bounds = [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] == 1:
        bounds[-2:] = [(bounds[-2][0], n)]
    return bounds


def train_mscnn(
    model: Mscnn,
    train,
    val,
    cfg: TrainConfig = TrainConfig(),
    *,
    evaluate_fn: Callable = evaluate,
    on_epoch_end: Optional[Callable[[int, Mscnn, History], None]] = None,
):
    """Train ``model`` in place and return ``(model, history)``.

    Each epoch shuffles with the seeded generator, runs minibatches (the last
    one may be partial), then scores the validation set in eval mode. With
    early stopping enabled the best-validation parameters are restored at the
    end. Only unfrozen parameters are updated. ``on_epoch_end`` sees the
    model after each epoch; a truthy return value ends training there.
    """
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation sets must be non-empty")
    if cfg.gradient_check and model.dtype != np.float64:
        model = model.astype(np.float64)
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    trainable = model.trainable_names()
    opt = cfg.adam({n: params[n] for n in trainable})
    stopper = EarlyStopping(cfg.early_stop_patience)
    best_state = model.state()
    history = History()
    n = len(train)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for b, (start, stop) in enumerate(batch_bounds(n, cfg.batch_size)):
            idx = order[start:stop]
            x, y = train.patches[idx], train.labels[idx]
            logits, cache = model.forward(x, mode="train", rng=rng)
            loss, grad = softmax_cross_entropy(logits, y)
            if not math.isfinite(loss):
                raise TrainingDivergenceError(f"loss became {loss} at epoch {epoch}, batch {b}")
            if trainable:
                adam_step(params, model.backward(cache, grad), opt)
            loss_sum += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y).sum())
        val_loss, val_acc = evaluate_fn(model, val)
        rec = EpochRecord(epoch, loss_sum / n, correct / n, float(val_loss), float(val_acc), opt.current_lr())
        history.epochs.append(rec)
        log.info(
            "epoch %d train_loss %.4f train_acc %.4f val_loss %.4f val_acc %.4f",
            epoch, rec.train_loss, rec.train_accuracy, rec.val_loss, rec.val_accuracy,
        )
        improved, stop = stopper.update(epoch, rec.val_loss)
        if improved:
            best_state = model.state()
        halt = bool(on_epoch_end(epoch, model, history)) if on_epoch_end is not None else False
        if cfg.early_stopping and stop:
            history.stopped_early = True
            break
        if halt or (cfg.target_train_accuracy is not None and rec.train_accuracy >= cfg.target_train_accuracy):
            break
    history.best_epoch = stopper.best_epoch
    if cfg.early_stopping:
        model.load_state(best_state)
    return model, history
