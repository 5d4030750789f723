"""Signal conditioning for two-grid HD-sEMG recordings.

The chain is fixed: transient extraction, band-pass, z-score, rectification,
then sliding windows over a 6x6 patch of both grids. Each session carries a
``stage`` tag and every step checks that it runs directly after its
predecessor.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal as sps

from .errors import ConfigurationError, InputError

STAGES = ("raw", "transient", "filtered", "normalized", "rectified")
GRID_SHAPE = (2, 8, 8)
PATCH = 6


class DeadChannelWarning(UserWarning):
    """A channel had zero variance and was zeroed during normalization."""


def samples_for(seconds: float, sample_rate_hz: float) -> int:
    """Nearest-integer sample count; 0.2 s at 2048 Hz is 410 samples."""
    return int(np.floor(seconds * sample_rate_hz + 0.5))


@dataclass
class RecordingSession:
    subject_id: str
    gesture_label: int
    repetition: int
    grids: np.ndarray
    sample_rate_hz: float = 2048.0
    stage: str = "raw"
    dead_channels: tuple = ()

    def __post_init__(self):
        self.grids = np.asarray(self.grids)
        if self.grids.ndim != 4 or self.grids.shape[:3] != GRID_SHAPE:
            raise InputError(f"expected grids of shape (2, 8, 8, T), got {self.grids.shape}")
        if not 0 <= int(self.gesture_label) < 65:
            raise InputError(f"gesture label {self.gesture_label} outside [0, 65)")
        if not 1 <= int(self.repetition) <= 5:
            raise InputError(f"repetition {self.repetition} outside [1, 5]")
        if self.sample_rate_hz <= 0:
            raise InputError("sample rate must be positive")
        if self.stage not in STAGES:
            raise InputError(f"unknown stage {self.stage!r}")
        if self.n_samples < samples_for(0.2, self.sample_rate_hz):
            raise InputError(
                f"recording has {self.n_samples} samples, shorter than one 200 ms window")

    @property
    def n_samples(self) -> int:
        return self.grids.shape[-1]


def _require(session: RecordingSession, stage: str) -> None:
    want = STAGES[STAGES.index(stage) - 1]
    if session.stage != want:
        raise InputError(f"{stage} step needs a session at stage {want!r}, got {session.stage!r}")


def _advance(session: RecordingSession, stage: str, grids: np.ndarray, **changes) -> RecordingSession:
    _require(session, stage)
    return replace(session, grids=grids, stage=stage, **changes)


# -- filter design -------------------------------------------------------------

@dataclass(frozen=True)
class BiquadCascade:
    """Second-order sections in scipy's (b0, b1, b2, 1, a1, a2) row layout."""

    sos: np.ndarray
    order: int
    low_hz: float
    high_hz: float
    sample_rate_hz: float

    @property
    def sections(self) -> list[tuple[float, float, float, float, float]]:
        return [(b0, b1, b2, a1, a2) for b0, b1, b2, _, a1, a2 in self.sos]

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots(row[3:]) for row in self.sos])

    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles()) < 1.0))

    def response(self, freqs_hz) -> np.ndarray:
        """Complex frequency response evaluated on the unit circle."""
        z = np.exp(2j * np.pi * np.asarray(freqs_hz, dtype=float) / self.sample_rate_hz)
        h = np.ones_like(z)
        for b0, b1, b2, _, a1, a2 in self.sos:
            h *= (b0 + b1 / z + b2 / z ** 2) / (1 + a1 / z + a2 / z ** 2)
        return h


def design_butterworth_bandpass(order: int = 4, low_hz: float = 10.0, high_hz: float = 500.0,
                                sample_rate_hz: float = 2048.0) -> BiquadCascade:
    """Digital Butterworth band-pass via prewarped bilinear transform.

    ``order`` is the low-pass prototype order, so the cascade has ``order``
    biquads and ``2 * order`` poles.
    """
    if order < 1:
        raise ConfigurationError("filter order must be positive")
    if not 0 < low_hz < high_hz < sample_rate_hz / 2:
        raise ConfigurationError(
            f"band edges must satisfy 0 < low < high < fs/2, got {low_hz}, {high_hz}, fs={sample_rate_hz}")
    fs2 = 2.0 * sample_rate_hz
    w_lo = fs2 * np.tan(np.pi * low_hz / sample_rate_hz)
    w_hi = fs2 * np.tan(np.pi * high_hz / sample_rate_hz)
    bw, w0 = w_hi - w_lo, np.sqrt(w_lo * w_hi)

    m = np.arange(-order + 1, order, 2)
    proto = -np.exp(1j * np.pi * m / (2 * order))
    half = proto * bw / 2
    root = np.sqrt(half ** 2 - w0 ** 2)
    analog = np.concatenate([half + root, half - root])
    gain = bw ** order

    digital = (fs2 + analog) / (fs2 - analog)
    # order zeros at s=0 map to z=+1; order zeros at infinity map to z=-1
    gain = gain * np.real(fs2 ** order / np.prod(fs2 - analog))

    upper = digital[digital.imag > 1e-12]
    reals = np.sort(digital[np.abs(digital.imag) <= 1e-12].real)
    pairs = [(p, np.conj(p)) for p in upper] + [(reals[i], reals[i + 1]) for i in range(0, len(reals), 2)]
    # poles nearest the unit circle go last, which keeps the cascade well scaled
    pairs.sort(key=lambda pr: max(abs(pr[0]), abs(pr[1])))
    if len(pairs) != order:
        raise ConfigurationError("pole pairing failed")
    sos = np.zeros((order, 6))
    for i, (p1, p2) in enumerate(pairs):
        sos[i] = [1.0, 0.0, -1.0, 1.0, -np.real(p1 + p2), np.real(p1 * p2)]
    sos[0, :3] *= gain
    cascade = BiquadCascade(sos, order, float(low_hz), float(high_hz), float(sample_rate_hz))
    if not cascade.is_stable():
        raise ConfigurationError("designed filter is unstable")
    return cascade


def filtfilt(x: np.ndarray, cascade: BiquadCascade, axis: int = -1) -> np.ndarray:
    """Zero-phase forward-backward filtering with maximal odd-extension padding."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[axis]
    if n <= 3 * cascade.order:
        raise InputError(f"signal of {n} samples is too short for order-{cascade.order} filtfilt")
    return sps.sosfiltfilt(cascade.sos, x, axis=axis, padtype="odd", padlen=n - 1)


# -- session steps -------------------------------------------------------------

def extract_transient(session: RecordingSession, duration_s: float = 1.2,
                      onset_index: int = 0) -> RecordingSession:
    length = samples_for(duration_s, session.sample_rate_hz)
    if onset_index < 0 or onset_index + length > session.n_samples:
        raise InputError(
            f"transient [{onset_index}, {onset_index + length}) exceeds recording of "
            f"{session.n_samples} samples")
    return _advance(session, "transient", session.grids[..., onset_index:onset_index + length])


def bandpass(session: RecordingSession, cascade: BiquadCascade) -> RecordingSession:
    if abs(cascade.sample_rate_hz - session.sample_rate_hz) > 1e-9:
        raise ConfigurationError("filter and session sample rates differ")
    _require(session, "filtered")
    return _advance(session, "filtered", filtfilt(session.grids, cascade))


def zscore_channels(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel z-score along the last axis; returns (values, dead mask)."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    std = x.std(axis=-1, keepdims=True)
    # relative floor: a constant raw channel leaves round-off residue after filtering
    floor = max(np.finfo(np.float64).tiny, 1e-9 * float(std.max(initial=0.0)))
    dead = std[..., 0] <= floor
    out = np.where(dead[..., None], 0.0, (x - mean) / np.where(dead[..., None], 1.0, std))
    return out, dead


def zscore(session: RecordingSession) -> RecordingSession:
    _require(session, "normalized")
    out, dead = zscore_channels(session.grids)
    where = tuple(tuple(int(v) for v in idx) for idx in np.argwhere(dead))
    if where:
        warnings.warn(f"zero-variance channels zeroed: {where}", DeadChannelWarning, stacklevel=2)
    return _advance(session, "normalized", out, dead_channels=where)


def rectify(session: RecordingSession) -> RecordingSession:
    return _advance(session, "rectified", np.abs(session.grids))


# -- windowing -----------------------------------------------------------------

@dataclass
class WindowSample:
    tensor: np.ndarray  # (2, L, 6, 6)
    gesture_label: int
    subject_id: str
    repetition: int
    shift: tuple[int, int] = (1, 1)
    mask_id: str | None = None
    window_index: int = 0


def window_count(n_samples: int, sample_rate_hz: float, window_s: float = 0.2,
                 step_s: float = 0.01) -> int:
    length = samples_for(window_s, sample_rate_hz)
    step = samples_for(step_s, sample_rate_hz)
    if step < 1:
        raise ConfigurationError("window step rounds to zero samples")
    if n_samples < length:
        return 0
    return (n_samples - length) // step + 1


def slide_windows(session: RecordingSession, window_s: float = 0.2, step_s: float = 0.01,
                  offset: tuple[int, int] = (1, 1)) -> list[WindowSample]:
    """Cut overlapping windows from one 6x6 patch (same offset on both grids)."""
    if session.stage != "rectified":
        raise InputError(f"windowing needs a rectified session, got stage {session.stage!r}")
    r, c = offset
    if not (0 <= r <= 8 - PATCH and 0 <= c <= 8 - PATCH):
        raise InputError(f"patch offset {offset} does not fit an 8x8 grid")
    length = samples_for(window_s, session.sample_rate_hz)
    step = samples_for(step_s, session.sample_rate_hz)
    if session.n_samples < length:
        raise InputError(f"segment of {session.n_samples} samples is shorter than window {length}")
    count = window_count(session.n_samples, session.sample_rate_hz, window_s, step_s)
    patch = session.grids[:, r:r + PATCH, c:c + PATCH, :]
    views = sliding_window_view(patch, length, axis=-1)[:, :, :, ::step, :]
    # (2, 6, 6, count, L) -> count x (2, L, 6, 6), all views
    views = views.transpose(3, 0, 4, 1, 2)
    return [WindowSample(views[i], int(session.gesture_label), session.subject_id,
                         int(session.repetition), (r, c), None, i) for i in range(count)]


@dataclass(frozen=True)
class PreprocessConfig:
    filter_order: int = 4
    low_hz: float = 10.0
    high_hz: float = 500.0
    transient_s: float = 1.2
    window_s: float = 0.2
    step_s: float = 0.01
    dtype: str = "float32"
    offsets: tuple = field(default=((1, 1),))


def preprocess_session(session: RecordingSession, config: PreprocessConfig = PreprocessConfig(),
                       onset_index: int = 0, cascade: BiquadCascade | None = None) -> list[WindowSample]:
    """Run the full chain and return windows for every configured patch offset."""
    if cascade is None:
        cascade = design_butterworth_bandpass(config.filter_order, config.low_hz, config.high_hz,
                                              session.sample_rate_hz)
    s = extract_transient(session, config.transient_s, onset_index)
    s = bandpass(s, cascade)
    s = zscore(s)
    s = rectify(s)
    s = replace(s, grids=s.grids.astype(config.dtype))
    out: list[WindowSample] = []
    for offset in config.offsets:
        out.extend(slide_windows(s, config.window_s, config.step_s, tuple(offset)))
    return out
