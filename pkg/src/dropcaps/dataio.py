"""Canonical on-disk formats: recordings, window datasets, manifests and run configuration.

A recording is a JSON sidecar plus a raw file of little-endian float32
values, channel-major: 128 channels (grid 0 row-major, then grid 1), each
holding T consecutive samples.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np

from .dsp import GRID_SHAPE, RecordingSession, WindowSample
from .errors import ConfigurationError, FormatError, VersionError

FORMAT_VERSION = 1
N_CHANNELS = int(np.prod(GRID_SHAPE))
GRID_LAYOUT = "2x8x8 row-major, grid0 then grid1"


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def _check_version(doc: dict, path) -> None:
    version = doc.get("format_version")
    if version is None:
        raise FormatError(f"{path}: missing format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported format_version {version}")


def _require_keys(doc: dict, keys, path) -> None:
    missing = [k for k in keys if k not in doc]
    if missing:
        raise FormatError(f"{path}: missing keys {missing}")


# -- recordings ----------------------------------------------------------------------

def write_recording(session: RecordingSession, directory, stem: str | None = None) -> Path:
    """Write ``<stem>.json`` and ``<stem>.f32``; returns the sidecar path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = stem or f"{session.subject_id}_g{session.gesture_label:02d}_r{session.repetition}"
    raw = np.ascontiguousarray(session.grids.reshape(N_CHANNELS, -1), dtype="<f4").tobytes()
    data_path = directory / f"{stem}.f32"
    sidecar = {
        "format_version": FORMAT_VERSION,
        "subject_id": session.subject_id,
        "gesture_label": int(session.gesture_label),
        "repetition": int(session.repetition),
        "sample_rate_hz": float(session.sample_rate_hz),
        "n_samples": int(session.n_samples),
        "n_channels": N_CHANNELS,
        "grid_layout": GRID_LAYOUT,
        "data_file": data_path.name,
        "sha256": _sha256(raw),
    }
    _atomic_write(data_path, raw)
    side_path = directory / f"{stem}.json"
    _atomic_write(side_path, (json.dumps(sidecar, indent=2, sort_keys=True) + "\n").encode())
    return side_path


def import_recording(path, manifest: "DatasetManifest | None" = None) -> RecordingSession:
    """Load a recording from its sidecar, checking version, size and checksum."""
    path = Path(path)
    doc = _read_json(path)
    _check_version(doc, path)
    _require_keys(doc, ("subject_id", "gesture_label", "repetition", "sample_rate_hz",
                        "n_samples", "n_channels", "data_file"), path)
    if doc["n_channels"] != N_CHANNELS:
        raise FormatError(f"{path}: expected {N_CHANNELS} channels, sidecar says {doc['n_channels']}")
    data_path = path.parent / doc["data_file"]
    if not data_path.exists():
        raise FormatError(f"{path}: data file {data_path.name} not found")
    raw = data_path.read_bytes()
    expected = 4 * N_CHANNELS * int(doc["n_samples"])
    if len(raw) != expected:
        raise FormatError(f"{data_path}: expected {expected} bytes, found {len(raw)}")
    if "sha256" in doc and _sha256(raw) != doc["sha256"]:
        raise FormatError(f"{data_path}: checksum mismatch")
    if manifest is not None:
        if doc["subject_id"] in manifest.excluded_subjects:
            raise FormatError(f"{path}: subject {doc['subject_id']} is excluded by the manifest")
        if doc["subject_id"] not in manifest.subjects:
            raise FormatError(f"{path}: subject {doc['subject_id']} not listed in the manifest")
        if float(doc["sample_rate_hz"]) != float(manifest.sample_rate_hz):
            raise FormatError(f"{path}: sample rate {doc['sample_rate_hz']} differs from manifest")
    grids = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(GRID_SHAPE + (-1,))
    return RecordingSession(str(doc["subject_id"]), int(doc["gesture_label"]), int(doc["repetition"]),
                            grids, float(doc["sample_rate_hz"]))


@dataclass
class DatasetManifest:
    subjects: list
    gestures: list
    repetitions: int = 5
    sample_rate_hz: float = 2048.0
    excluded_subjects: list = field(default_factory=list)
    recordings: list = field(default_factory=list)  # sidecar paths relative to the manifest

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, **asdict(self)}

    def save(self, path) -> None:
        _atomic_write(Path(path), (json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n").encode())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        doc = _read_json(Path(path))
        _check_version(doc, path)
        _require_keys(doc, ("subjects", "gestures"), path)
        doc.pop("format_version")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise FormatError(f"{path}: {exc}") from exc

    def included_subjects(self) -> list:
        return [s for s in self.subjects if s not in self.excluded_subjects]

    def validate(self, root) -> list[RecordingSession]:
        """Import every referenced recording; raises on the first missing or malformed file."""
        root = Path(root)
        sessions = []
        for rel in self.recordings:
            p = root / rel
            if not p.exists():
                raise FormatError(f"manifest references missing file {rel}")
            s = import_recording(p, self)
            if s.gesture_label >= len(self.gestures) or s.repetition > self.repetitions:
                raise FormatError(f"{rel}: gesture or repetition outside the manifest's range")
            sessions.append(s)
        return sessions


def export_sessions(sessions: Sequence[RecordingSession], directory, excluded=()) -> DatasetManifest:
    directory = Path(directory)
    paths = [write_recording(s, directory).name for s in sessions]
    subjects = list(dict.fromkeys(s.subject_id for s in sessions))
    n_gestures = max(s.gesture_label for s in sessions) + 1
    manifest = DatasetManifest(subjects, list(range(n_gestures)),
                               max(s.repetition for s in sessions),
                               float(sessions[0].sample_rate_hz), list(excluded), paths)
    manifest.save(directory / "manifest.json")
    return manifest


# -- window datasets ---------------------------------------------------------------

def export_dataset(samples: Sequence[WindowSample], directory, config_hash: str = "") -> Path:
    """Write ``windows.json`` + ``windows.f32`` (samples stacked in order)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if samples:
        stacked = np.stack([s.tensor for s in samples]).astype("<f4")
        shape = list(stacked.shape[1:])
    else:
        stacked, shape = np.zeros(0, dtype="<f4"), []
    raw = stacked.tobytes()
    doc = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "count": len(samples),
        "sample_shape": shape,
        "data_file": "windows.f32",
        "sha256": _sha256(raw),
        "samples": [{"gesture_label": int(s.gesture_label), "subject_id": s.subject_id,
                     "repetition": int(s.repetition), "shift": list(s.shift),
                     "mask_id": s.mask_id, "window_index": int(s.window_index)} for s in samples],
    }
    _atomic_write(directory / "windows.f32", raw)
    meta = directory / "windows.json"
    _atomic_write(meta, (json.dumps(doc, sort_keys=True) + "\n").encode())
    return meta


def import_dataset(directory, config_hash: str | None = None) -> list[WindowSample]:
    directory = Path(directory)
    meta = directory / "windows.json"
    doc = _read_json(meta)
    _check_version(doc, meta)
    _require_keys(doc, ("config_hash", "count", "sample_shape", "data_file", "sha256", "samples"), meta)
    if config_hash is not None and doc["config_hash"] != config_hash:
        raise FormatError(f"{meta}: built with config {doc['config_hash']!r}, expected {config_hash!r}")
    raw = (directory / doc["data_file"]).read_bytes()
    per = int(np.prod(doc["sample_shape"])) if doc["sample_shape"] else 0
    expected = 4 * per * doc["count"]
    if len(raw) != expected:
        raise FormatError(f"{directory / doc['data_file']}: expected {expected} bytes, found {len(raw)}")
    if _sha256(raw) != doc["sha256"]:
        raise FormatError(f"{directory / doc['data_file']}: checksum mismatch")
    if doc["count"] == 0:
        return []
    arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape([doc["count"]] + doc["sample_shape"])
    return [WindowSample(arr[i], m["gesture_label"], m["subject_id"], m["repetition"],
                         tuple(m["shift"]), m["mask_id"], m["window_index"])
            for i, m in enumerate(doc["samples"])]


# -- configuration --------------------------------------------------------------------

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT = {"type": "integer", "minimum": 0}
_PINT = {"type": "integer", "minimum": 1}
_REPS = {"type": "array", "items": {"type": "integer", "minimum": 1, "maximum": 5},
         "minItems": 1, "uniqueItems": True}
_RATE = {"type": "number", "minimum": 0, "exclusiveMaximum": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": _INT,
        "n_classes": {"type": "integer", "minimum": 2, "maximum": 65},
        "n_subjects": _PINT,
        "sample_rate_hz": _POS,
        "duration_s": _POS,
        "onset_s": {"type": "number", "minimum": 0},
        "noise_level": {"type": "number", "minimum": 0},
        "spatial_width": _POS,
        "filter_order": _PINT,
        "low_hz": _POS,
        "high_hz": _POS,
        "transient_s": _POS,
        "window_s": _POS,
        "step_s": _POS,
        "model": {"enum": ["capsnet", "cnn3d"]},
        "model_width": _PINT,
        "epochs": _INT,
        "steps_per_epoch": _INT,
        "batch_size": {"type": "integer", "minimum": 2},
        "learning_rate": _POS,
        "beta1": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "beta2": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "train_repetitions": _REPS,
        "test_repetitions": _REPS,
        "strategies": {"type": "array", "minItems": 1, "uniqueItems": True,
                       "items": {"type": "string", "pattern": "^(none|combined|[0-9]{1,2})$"}},
        "masks_per_rate": _PINT,
        "augment_rates": {"type": "array", "items": {**_RATE, "exclusiveMinimum": 0}, "minItems": 1},
        "eval_rates": {"type": "array", "items": _RATE, "minItems": 1, "uniqueItems": True},
        "n_test_masks": _PINT,
        "family_size": _PINT,
        "grid_policy": {"enum": ["shared", "independent"]},
    },
}
CONFIG_SCHEMA["required"] = sorted(CONFIG_SCHEMA["properties"])


def default_config() -> dict:
    """Desk-scale defaults; every key is required in user configs too."""
    return {
        "seed": 0,
        "n_classes": 8,
        "n_subjects": 2,
        "sample_rate_hz": 320.0,
        "duration_s": 1.6,
        "onset_s": 0.2,
        "noise_level": 0.5,
        "spatial_width": 1.3,
        "filter_order": 4,
        "low_hz": 10.0,
        "high_hz": 150.0,
        "transient_s": 1.2,
        "window_s": 0.2,
        "step_s": 0.05,
        "model": "capsnet",
        "model_width": 16,
        "epochs": 10,
        "steps_per_epoch": 200,
        "batch_size": 32,
        "learning_rate": 2e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "train_repetitions": [1, 3, 4],
        "test_repetitions": [2, 5],
        "strategies": ["none", "combined"],
        "masks_per_rate": 6,
        "augment_rates": [0.1, 0.25, 0.5, 0.75],
        "eval_rates": [0.0, 0.1, 0.25, 0.5, 0.75],
        "n_test_masks": 30,
        "family_size": 4,
        "grid_policy": "shared",
    }


def validate_config(doc: dict) -> dict:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        lines = [(".".join(map(str, e.path)) + ": " if e.path else "") + e.message for e in errors]
        raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(lines))
    if set(doc["train_repetitions"]) & set(doc["test_repetitions"]):
        raise ConfigurationError("invalid configuration: train and test repetitions overlap")
    if not doc["low_hz"] < doc["high_hz"] < doc["sample_rate_hz"] / 2:
        raise ConfigurationError("invalid configuration: need low_hz < high_hz < sample_rate_hz / 2")
    return doc


def load_config(path) -> dict:
    return validate_config(_read_json(Path(path)))


def config_hash(doc: dict) -> str:
    return _sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode())


# keys that determine the preprocessed windows; training settings may vary freely
DATA_KEYS = ("seed", "n_classes", "n_subjects", "sample_rate_hz", "duration_s", "onset_s", "noise_level",
             "spatial_width", "filter_order", "low_hz", "high_hz", "transient_s", "window_s", "step_s")


def data_hash(doc: dict) -> str:
    return config_hash({k: doc[k] for k in DATA_KEYS})
