"""Bridge from raw multichannel arrays to the canonical recording format.

Users who hold a real two-grid HD-sEMG recording (two 8x8 grids, 128 channels,
typically 2048 Hz) load it with whatever reader their files need and hand the
``(T, 128)`` sample matrix to :func:`session_from_matrix`.  The result can be
written with :func:`dropcaps.dataio.export_sessions` and then consumed by every
CLI stage that accepts ``--recordings``.

Channel mapping: column ``g * 64 + r * 8 + c`` is grid ``g``, row ``r``,
column ``c`` (``order="row"``).  Amplifiers that enumerate electrodes down
columns first use ``order="column"``.  Gesture labels are zero-based and
repetitions one-based.  Reading vendor file formats is left to the caller.
"""
from __future__ import annotations

import numpy as np

from .dsp import RecordingSession
from .errors import InputError


def session_from_matrix(samples, subject_id: str, gesture_label: int, repetition: int,
                        sample_rate_hz: float = 2048.0, order: str = "row",
                        dead_channels=()) -> RecordingSession:
    x = np.asarray(samples, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != 128:
        raise InputError(f"expected a (T, 128) sample matrix, got {x.shape}")
    if order not in ("row", "column"):
        raise InputError(f"order must be 'row' or 'column', got {order!r}")
    grids = x.T.reshape(2, 8, 8, -1)
    if order == "column":
        grids = grids.transpose(0, 2, 1, 3)
    return RecordingSession(subject_id, int(gesture_label), int(repetition),
                            np.ascontiguousarray(grids), float(sample_rate_hz),
                            dead_channels=tuple(dead_channels))
