"""Masked test evaluation against held-out dropout patterns."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .augment import DropoutMask, generate_masks, keep_factor
from .dsp import WindowSample
from .errors import InputError, ProtocolError
from .stats import SignificanceCell, mann_whitney_u


@dataclass(frozen=True)
class AccuracyDistribution:
    """Accuracies with one unit tag each: ``subject`` at rate 0, ``subject/mask_id`` otherwise."""

    model_id: str
    strategy: str
    rate: float
    values: tuple
    units: tuple
    mask_seeds: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "units", tuple(str(u) for u in self.units))
        object.__setattr__(self, "mask_seeds", tuple(int(s) for s in self.mask_seeds))
        if not self.values:
            raise InputError("an accuracy distribution needs at least one value")
        if len(self.units) != len(self.values):
            raise InputError("one unit tag per value required")
        if any(not 0.0 <= v <= 1.0 for v in self.values):
            raise InputError("accuracies must lie in [0, 1]")

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "strategy": self.strategy, "rate": self.rate,
                "values": list(self.values), "units": list(self.units),
                "mask_seeds": list(self.mask_seeds), "mean": self.mean}


def _stack(test_set: Sequence[WindowSample]):
    if len(test_set) == 0:
        raise InputError("test set is empty")
    x = np.stack([s.tensor for s in test_set])
    y = np.array([s.gesture_label for s in test_set])
    subjects = np.array([s.subject_id for s in test_set])
    return x, y, subjects


def held_out_masks(rate: float, n_masks: int, seed: int,
                   training_masks: Iterable[DropoutMask] = ()) -> list[DropoutMask]:
    """Held-out patterns: distinct from each other and from every training mask."""
    training_masks = list(training_masks)
    masks = generate_masks(rate, n_masks, seed, "test", exclude=training_masks)
    train_seeds = {m.seed for m in training_masks}
    clash = [m.mask_id for m in masks if m.seed in train_seeds]
    if clash:
        raise ProtocolError(f"test mask seeds collide with training masks: {clash}")
    train_keys = {m.key() for m in training_masks}
    if any(m.key() in train_keys for m in masks):
        raise ProtocolError("a test pattern repeats a training pattern")
    return masks


def evaluate_under_dropout(model, test_set: Sequence[WindowSample], rate: float, n_masks: int = 30,
                           seed: int = 0, training_masks: Iterable[DropoutMask] = (),
                           model_id: str = "", strategy: str = "",
                           batch_size: int = 32) -> AccuracyDistribution:
    """Per-subject (rate 0) or per-(subject, mask) accuracy of ``model.predict``."""
    x, y, subjects = _stack(test_set)
    order = list(dict.fromkeys(subjects.tolist()))
    if rate == 0:
        correct = model.predict(x, batch_size) == y
        values = [correct[subjects == s].mean() for s in order]
        return AccuracyDistribution(model_id, strategy, 0.0, values, order)
    masks = held_out_masks(rate, n_masks, seed, training_masks)
    values, units, seeds = [], [], []
    for mask in masks:
        correct = model.predict(x * keep_factor(mask), batch_size) == y
        for s in order:
            values.append(correct[subjects == s].mean())
            units.append(f"{s}/{mask.mask_id}")
            seeds.append(mask.seed)
    return AccuracyDistribution(model_id, strategy, float(rate), values, units, seeds)


def significance_row(clean: AccuracyDistribution, masked: Sequence[AccuracyDistribution],
                     family_size: int | None = None) -> dict[float, SignificanceCell]:
    """Compare each masked distribution with the clean one; family defaults to the row length."""
    m = family_size or len(masked)
    return {d.rate: SignificanceCell.from_p(mann_whitney_u(clean.values, d.values).p_value, m)
            for d in masked}
