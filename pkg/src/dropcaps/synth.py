"""Deterministic synthetic two-grid recordings with localized class patterns.

Each gesture class activates a Gaussian blob of electrodes on each grid.
Active channels carry band-limited noise shaped by a shared envelope: a
floor before onset, a smooth rise, then a plateau with slow amplitude
modulation. Per-channel z-scoring erases absolute amplitude, so the
modulated envelope is what keeps the class pattern visible after
preprocessing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import RecordingSession, samples_for
from .errors import ConfigurationError


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 8
    n_subjects: int = 2
    repetitions: int = 5
    sample_rate_hz: float = 320.0
    duration_s: float = 1.6
    onset_s: float = 0.2
    width: float = 1.3
    centers: tuple | None = None  # (n_classes, 2 grids, 2 coords), electrode units
    min_separation: float = 2.0
    envelope_floor: float = 0.1
    rise_s: float = 0.25
    modulation_hz: float = 5.0
    modulation_depth: float = 0.8
    carrier_band: tuple = (25.0, 120.0)
    noise_level: float = 0.5
    carrier_jitter: float = 1.0  # per-repetition carrier noise, in units of noise_level
    sensor_floor: float = 0.5  # electrode noise on every channel, in units of noise_level
    subject_jitter: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 1 or self.n_subjects < 1 or not 1 <= self.repetitions <= 5:
            raise ConfigurationError("need >= 1 class, >= 1 subject and 1..5 repetitions")
        if self.width <= 0:
            raise ConfigurationError("spatial width must be positive")
        n = samples_for(self.duration_s, self.sample_rate_hz)
        if n < samples_for(0.2, self.sample_rate_hz):
            raise ConfigurationError(f"{n} samples per repetition is shorter than one window")
        lo, hi = self.carrier_band
        if not 0 < lo < hi < self.sample_rate_hz / 2:
            raise ConfigurationError("carrier band must lie strictly inside (0, fs/2)")
        if min(self.noise_level, self.carrier_jitter, self.sensor_floor) < 0:
            raise ConfigurationError("noise parameters must be non-negative")
        if self.centers is not None:
            c = np.asarray(self.centers, dtype=float)
            if c.shape != (self.n_classes, 2, 2):
                raise ConfigurationError(f"centers must have shape ({self.n_classes}, 2, 2)")
            flat = c.reshape(self.n_classes, 4)
            d = np.linalg.norm(flat[:, None] - flat[None], axis=-1)
            if np.any(d[np.triu_indices(self.n_classes, 1)] < 1e-9):
                raise ConfigurationError("two classes share identical activation centers")

    @property
    def n_samples(self) -> int:
        return samples_for(self.duration_s, self.sample_rate_hz)


def class_centers(spec: SynthSpec) -> np.ndarray:
    """(n_classes, 2, 2) centers, drawn inside the central 6x6 patch when not given."""
    if spec.centers is not None:
        return np.asarray(spec.centers, dtype=float)
    rng = np.random.default_rng([spec.seed, 7001])
    out: list[np.ndarray] = []
    sep = spec.min_separation
    while len(out) < spec.n_classes:
        for _ in range(5000):
            cand = rng.uniform(1.5, 5.5, size=(2, 2))
            if all(np.linalg.norm(cand - o) >= sep for o in out):
                out.append(cand)
                break
        else:
            sep *= 0.9
    return np.stack(out)


def spatial_map(centers: np.ndarray, width: float) -> np.ndarray:
    """(2, 8, 8) Gaussian activation for one class."""
    r, c = np.indices((8, 8))
    maps = [np.exp(-((r - cy) ** 2 + (c - cx) ** 2) / (2 * width ** 2)) for cy, cx in centers]
    return np.stack(maps)


def band_noise(rng: np.random.Generator, shape, band, fs: float) -> np.ndarray:
    """Unit-variance noise restricted to ``band`` Hz along the last axis."""
    n = shape[-1]
    spec = np.fft.rfft(rng.normal(size=shape), axis=-1)
    f = np.fft.rfftfreq(n, 1.0 / fs)
    spec[..., (f < band[0]) | (f > band[1])] = 0
    x = np.fft.irfft(spec, n=n, axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def envelope(spec: SynthSpec) -> np.ndarray:
    t = np.arange(spec.n_samples) / spec.sample_rate_hz
    u = np.clip((t - spec.onset_s) / spec.rise_s, 0.0, 1.0)
    rise = u * u * (3 - 2 * u)
    mod = 1 - spec.modulation_depth * 0.5 * (1 + np.sin(2 * np.pi * spec.modulation_hz * t))
    return spec.envelope_floor + (1 - spec.envelope_floor) * rise * mod


def generate(spec: SynthSpec = SynthSpec()) -> list[RecordingSession]:
    """Sessions ordered by subject, class, repetition."""
    centers = class_centers(spec)
    n = spec.n_samples
    env = envelope(spec)
    sessions = []
    for s in range(spec.n_subjects):
        srng = np.random.default_rng([spec.seed, 1, s])
        shift = srng.normal(0.0, spec.subject_jitter, size=(2, 2)) if s else np.zeros((2, 2))
        # one carrier per subject: classes differ only in where the activity sits
        carrier = band_noise(np.random.default_rng([spec.seed, 2, s]), (2, 8, 8, n),
                             spec.carrier_band, spec.sample_rate_hz)
        for k in range(spec.n_classes):
            amp = spatial_map(centers[k] + shift, spec.width)
            for rep in range(1, spec.repetitions + 1):
                rrng = np.random.default_rng([spec.seed, 3, s, k, rep])
                fresh = band_noise(rrng, (2, 8, 8, n), spec.carrier_band, spec.sample_rate_hz)
                sensor = rrng.normal(size=(2, 8, 8, n))
                gain = 1.0 + 0.1 * spec.noise_level * rrng.normal()
                x = (gain * amp[..., None] * env * (carrier + spec.noise_level * spec.carrier_jitter * fresh)
                     + spec.noise_level * spec.sensor_floor * sensor)
                sessions.append(RecordingSession(f"s{s + 1:02d}", k, rep, x.astype(np.float32),
                                                 spec.sample_rate_hz))
    return sessions


def channel_rms(session: RecordingSession) -> np.ndarray:
    return np.sqrt(np.mean(np.asarray(session.grids, dtype=np.float64) ** 2, axis=-1)).ravel()


def separability(sessions: list[RecordingSession]) -> tuple[float, float]:
    """(mean inter-class, mean intra-class) distance between spatial RMS maps."""
    feats = np.stack([channel_rms(s) for s in sessions])
    labels = np.array([s.gesture_label for s in sessions])
    subj = np.array([s.subject_id for s in sessions])
    d = np.linalg.norm(feats[:, None] - feats[None], axis=-1)
    same_subject = subj[:, None] == subj[None]
    same = (labels[:, None] == labels[None]) & same_subject
    np.fill_diagonal(same, False)
    diff = (labels[:, None] != labels[None]) & same_subject
    return float(d[diff].mean()), float(d[same].mean())
