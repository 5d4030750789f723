"""Ring-proportional channel-dropout masks and electrode-shift patches."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .dsp import PATCH, WindowSample
from .errors import ConfigurationError, InputError

_r, _c = np.indices((PATCH, PATCH))
RING_OF = np.minimum.reduce([_r, _c, PATCH - 1 - _r, PATCH - 1 - _c])  # 0 = perimeter
RING_CELLS = [np.flatnonzero(RING_OF.ravel() == k) for k in range(PATCH // 2)]
RING_SIZES = tuple(len(c) for c in RING_CELLS)  # (20, 12, 4)
STANDARD_RATES = (0.0, 0.10, 0.25, 0.50, 0.75)
ALL_OFFSETS = tuple((r, c) for r in range(8 - PATCH + 1) for c in range(8 - PATCH + 1))

_PURPOSE = {"train": 1, "test": 2}


def ring_drop_counts(rate: float) -> tuple[int, ...]:
    """Cells to drop per ring: nearest integer of rate * ring size, ties up."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must lie in [0, 1), got {rate}")
    return tuple(int(math.floor(rate * size + 0.5 + 1e-9)) for size in RING_SIZES)


def mask_seed(master_seed: int, purpose: str, rate: float, index: int, attempt: int = 0) -> int:
    """Derive a reproducible 63-bit seed; train and test seeds use separate streams."""
    words = [int(master_seed) & 0xFFFFFFFF, _PURPOSE[purpose], int(round(rate * 10000)), index, attempt]
    hi, lo = (int(v) for v in np.random.SeedSequence(words).generate_state(2))
    return ((hi << 32) | lo) & ((1 << 63) - 1)


@dataclass(frozen=True)
class DropoutMask:
    cells: np.ndarray  # (6, 6) bool, True = dropped
    nominal_rate: float
    ring_drop_counts: tuple[int, int, int]
    mask_id: str
    seed: int | None = None

    @property
    def n_dropped(self) -> int:
        return int(self.cells.sum())

    @property
    def realized_rate(self) -> float:
        return self.n_dropped / self.cells.size

    def key(self) -> bytes:
        return np.packbits(self.cells.ravel()).tobytes()

    def to_dict(self) -> dict:
        return {"mask_id": self.mask_id, "rate": self.nominal_rate, "seed": self.seed,
                "cells": [bool(v) for v in self.cells.ravel()]}

    @classmethod
    def from_dict(cls, doc: dict) -> "DropoutMask":
        cells = np.array(doc["cells"], dtype=bool)
        if cells.size != PATCH * PATCH:
            raise InputError(f"mask needs {PATCH * PATCH} cells, got {cells.size}")
        cells = cells.reshape(PATCH, PATCH)
        counts = tuple(int(cells.ravel()[idx].sum()) for idx in RING_CELLS)
        return cls(cells, float(doc["rate"]), counts, str(doc["mask_id"]),
                   None if doc.get("seed") is None else int(doc["seed"]))


def generate_mask(rate: float, rng: int | np.random.Generator, mask_id: str | None = None) -> DropoutMask:
    """Drop round(rate * size) cells uniformly at random inside each ring."""
    counts = ring_drop_counts(rate)
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    flat = np.zeros(PATCH * PATCH, dtype=bool)
    for idx, k in zip(RING_CELLS, counts):
        if k:
            flat[rng.choice(idx, size=k, replace=False)] = True
    if mask_id is None:
        mask_id = f"r{round(rate * 100):02d}-{seed if seed is not None else 'x'}"
    return DropoutMask(flat.reshape(PATCH, PATCH), float(rate), counts, mask_id, seed)


def generate_masks(rate: float, count: int, master_seed: int, purpose: str = "train",
                   exclude: Iterable[DropoutMask] = ()) -> list[DropoutMask]:
    """``count`` pairwise-distinct masks; a duplicate pattern retries with the next seed."""
    if purpose not in _PURPOSE:
        raise ConfigurationError(f"unknown mask purpose {purpose!r}")
    taken = {m.key() for m in exclude}
    out = []
    for i in range(count):
        for attempt in range(1000):
            seed = mask_seed(master_seed, purpose, rate, i, attempt)
            m = generate_mask(rate, seed, f"{purpose}-r{round(rate * 100):02d}-{i:02d}")
            if m.key() not in taken:
                break
        else:
            raise ConfigurationError(f"could not draw {count} distinct masks at rate {rate}")
        taken.add(m.key())
        out.append(m)
    return out


def save_masks(masks: Sequence[DropoutMask], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"format_version": 1, "masks": [m.to_dict() for m in masks]}, fh, indent=1)


def load_masks(path) -> list[DropoutMask]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != 1:
        raise InputError(f"unsupported mask file version {doc.get('format_version')!r}")
    return [DropoutMask.from_dict(d) for d in doc["masks"]]


# -- applying masks --------------------------------------------------------------

def keep_factor(mask: DropoutMask, second: DropoutMask | None = None,
                grid_policy: str = "shared") -> np.ndarray:
    """(2, 1, 6, 6) multiplier with zeros at dropped electrodes."""
    if grid_policy == "shared":
        cells = np.stack([mask.cells, mask.cells])
    elif grid_policy == "independent":
        if second is None:
            raise ConfigurationError("independent grid policy needs a second mask")
        cells = np.stack([mask.cells, second.cells])
    else:
        raise ConfigurationError(f"unknown grid policy {grid_policy!r}")
    return (~cells)[:, None, :, :]


def apply_mask(samples: Sequence[WindowSample], mask: DropoutMask, grid_policy: str = "shared",
               second_mask: DropoutMask | None = None) -> list[WindowSample]:
    keep = keep_factor(mask, second_mask, grid_policy)
    mid = mask.mask_id if second_mask is None else f"{mask.mask_id}|{second_mask.mask_id}"
    out = []
    for s in samples:
        if s.tensor.ndim != 4 or s.tensor.shape[0] != 2 or s.tensor.shape[2:] != (PATCH, PATCH):
            raise InputError(f"expected a (2, L, 6, 6) window, got {s.tensor.shape}")
        tag = mid if s.mask_id in (None, mid) else f"{s.mask_id}+{mid}"
        out.append(replace(s, tensor=s.tensor * keep.astype(s.tensor.dtype), mask_id=tag))
    return out


# -- shifts -------------------------------------------------------------------------

def enumerate_shifts(grid: np.ndarray) -> dict[tuple[int, int], np.ndarray]:
    """All stride-one 6x6 sub-grids of an (..., 8, 8, T) array, as views."""
    grid = np.asarray(grid)
    if grid.ndim < 3 or grid.shape[-3:-1] != (8, 8):
        raise InputError(f"expected (..., 8, 8, T), got {grid.shape}")
    return {(r, c): grid[..., r:r + PATCH, c:c + PATCH, :] for r, c in ALL_OFFSETS}


# -- augmented sets -------------------------------------------------------------------

@dataclass
class AugmentationPlan:
    rates: tuple[float, ...]
    masks_per_rate: int = 6
    include_clean_duplicate: bool = True
    combine_all_rates: bool = False
    master_seed: int = 0
    grid_policy: str = "shared"

    def __post_init__(self):
        self.rates = tuple(float(r) for r in self.rates)
        for r in self.rates:
            ring_drop_counts(r)
        if not self.rates:
            raise ConfigurationError("plan needs at least one rate")
        if len(self.rates) > 1 and not self.combine_all_rates:
            raise ConfigurationError("several rates need combine_all_rates=True")
        if self.masks_per_rate < 1:
            raise ConfigurationError("masks_per_rate must be positive")
        if self.grid_policy not in ("shared", "independent"):
            raise ConfigurationError(f"unknown grid policy {self.grid_policy!r}")

    @property
    def label(self) -> str:
        if self.combine_all_rates:
            return "Combined"
        return f"{round(self.rates[0] * 100)}% Augmentation"

    def masks(self) -> list[DropoutMask]:
        """Every training mask of the plan; pairwise distinct across rates."""
        out: list[DropoutMask] = []
        n = self.masks_per_rate * (2 if self.grid_policy == "independent" else 1)
        for r in self.rates:
            if r == 0.0:
                continue
            out.extend(generate_masks(r, n, self.master_seed, "train", exclude=out))
        return out


@dataclass
class AugmentedSet:
    """Lazy view of ``base`` windows paired with optional masks."""

    base: list[WindowSample]
    entries: list[tuple[int, tuple[DropoutMask, ...]]]
    grid_policy: str = "shared"
    masks: list[DropoutMask] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def _keep(self, masks):
        if not masks:
            return None
        return keep_factor(masks[0], masks[1] if len(masks) > 1 else None, self.grid_policy)

    def __getitem__(self, i: int) -> WindowSample:
        idx, masks = self.entries[i]
        s = self.base[idx]
        if not masks:
            return s
        return apply_mask([s], masks[0], self.grid_policy, masks[1] if len(masks) > 1 else None)[0]

    def labels(self) -> np.ndarray:
        return np.array([self.base[i].gesture_label for i, _ in self.entries], dtype=np.int64)

    def repetitions(self) -> np.ndarray:
        return np.array([self.base[i].repetition for i, _ in self.entries], dtype=np.int64)

    def batch(self, indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        x = np.stack([self.base[self.entries[i][0]].tensor for i in indices])
        for row, i in enumerate(indices):
            keep = self._keep(self.entries[i][1])
            if keep is not None:
                x[row] *= keep
        y = np.array([self.base[self.entries[i][0]].gesture_label for i in indices], dtype=np.int64)
        return x, y


def build_augmented_set(base: Sequence[WindowSample], plan: AugmentationPlan) -> AugmentedSet:
    """Clean copy (optional) plus one masked copy of ``base`` per plan mask."""
    base = list(base)
    masks = plan.masks()
    entries: list[tuple[int, tuple]] = []
    if plan.include_clean_duplicate or not masks:
        entries.extend((i, ()) for i in range(len(base)))
    step = 2 if plan.grid_policy == "independent" else 1
    groups = [tuple(masks[k:k + step]) for k in range(0, len(masks), step)]
    for group in groups:
        entries.extend((i, group) for i in range(len(base)))
    return AugmentedSet(base, entries, plan.grid_policy, masks)
