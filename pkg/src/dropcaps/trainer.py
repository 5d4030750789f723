"""Seeded mini-batch training with repetition-based splits."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import checkpoint
from .augment import AugmentedSet
from .dsp import WindowSample
from .errors import ConfigurationError, DivergenceError, NumericError, ProtocolError
from .models import Model
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    steps_per_epoch: int = 0  # 0 = one full pass over the dataset
    train_repetitions: tuple = (1, 3, 4)
    test_repetitions: tuple = (2, 5)

    def __post_init__(self):
        object.__setattr__(self, "train_repetitions", tuple(int(r) for r in self.train_repetitions))
        object.__setattr__(self, "test_repetitions", tuple(int(r) for r in self.test_repetitions))
        if set(self.train_repetitions) & set(self.test_repetitions):
            raise ConfigurationError("train and test repetitions overlap")
        if self.epochs < 0 or self.batch_size < 2 or self.steps_per_epoch < 0:
            raise ConfigurationError("epochs >= 0, batch_size >= 2, steps_per_epoch >= 0 required")


def split_by_repetition(samples: Sequence[WindowSample], train_reps=(1, 3, 4),
                        test_reps=(2, 5)) -> tuple[list[WindowSample], list[WindowSample]]:
    if set(train_reps) & set(test_reps):
        raise ConfigurationError("train and test repetitions overlap")
    train = [s for s in samples if s.repetition in train_reps]
    test = [s for s in samples if s.repetition in test_reps]
    return train, test


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    checkpoint: bytes = b""


def _as_augmented(dataset) -> AugmentedSet:
    if isinstance(dataset, AugmentedSet):
        return dataset
    samples = list(dataset)
    return AugmentedSet(samples, [(i, ()) for i in range(len(samples))])


def train(model: Model, dataset, config: TrainConfig) -> TrainResult:
    """Fit ``model`` in place; identical seeds give identical histories and weights."""
    data = _as_augmented(dataset)
    if len(data) == 0:
        raise ConfigurationError("training set is empty")
    reps = data.repetitions()
    allowed = np.array(config.train_repetitions)
    opt = Adam(model.params, config.learning_rate, config.beta1, config.beta2)
    result = TrainResult()
    n = len(data)
    bs = min(config.batch_size, n)
    steps = config.steps_per_epoch or max(1, n // bs)
    for epoch in range(1, config.epochs + 1):
        order_rng = np.random.default_rng([config.seed, epoch, 0])
        drop_rng = np.random.default_rng([config.seed, epoch, 1])
        need = steps * bs
        order = np.concatenate([order_rng.permutation(n) for _ in range(-(-need // n))])[:need]
        total_loss, correct = 0.0, 0
        for step in range(steps):
            idx = order[step * bs:(step + 1) * bs]
            if not np.isin(reps[idx], allowed).all():
                raise ProtocolError("a batch contains windows from test repetitions")
            x, y = data.batch(idx)
            try:
                scores = model.forward(x, training=True, rng=drop_rng)
                loss = model.loss(scores, y)
            except NumericError as exc:
                raise DivergenceError(f"epoch {epoch} step {step}: {exc}") from exc
            if not np.isfinite(loss.data):
                raise DivergenceError(f"epoch {epoch} step {step}: loss is {loss.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(idx)
            correct += int((scores.data.argmax(axis=1) == y).sum())
        row = {"epoch": epoch, "loss": total_loss / need, "train_acc": correct / need}
        log.info("epoch %d loss %.4f acc %.3f", epoch, row["loss"], row["train_acc"])
        result.history.append(row)
    result.checkpoint = checkpoint.dumps(model)
    return result


def write_history_csv(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "train_acc"])
        for row in history:
            w.writerow([row["epoch"], repr(float(row["loss"])), repr(float(row["train_acc"]))])


def accuracy(model: Model, samples: Sequence[WindowSample], batch_size: int = 256) -> float:
    x = np.stack([s.tensor for s in samples])
    y = np.array([s.gesture_label for s in samples])
    return float((model.predict(x, batch_size) == y).mean())
