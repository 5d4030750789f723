"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes  b"DCAPSCKP"
    version    u32
    spec hash  32 bytes sha256 of the canonical model-spec JSON
    spec len   u32, followed by the spec JSON (utf-8)
    n blocks   u32
    block      u16 name length, name (utf-8), u8 ndim, ndim x u32 dims,
               prod(dims) float32 values
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError, VersionError
from .models import Model, build_model, spec_from_dict, spec_hash

MAGIC = b"DCAPSCKP"
VERSION = 1


def dumps(model: Model) -> bytes:
    buf = io.BytesIO()
    spec_doc = json.dumps(model.spec.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(spec_hash(model.spec))
    buf.write(struct.pack("<I", len(spec_doc)))
    buf.write(spec_doc)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into (spec dict, named arrays)."""
    r = _Reader(data)
    if r.take(8) != MAGIC:
        raise FormatError("not a dropcaps checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    digest = r.take(32)
    (n,) = r.unpack("<I")
    spec_doc = json.loads(r.take(n).decode())
    if spec_hash(spec_from_dict(spec_doc)) != digest:
        raise FormatError("spec hash does not match embedded spec")
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(dims)) if dims else 1
        state[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).copy()
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after last block")
    return spec_doc, state


def save(model: Model, path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path, model: Model | None = None) -> Model:
    """Load into ``model`` (spec must match) or build a fresh float32 model."""
    spec_doc, state = loads(Path(path).read_bytes())
    spec = spec_from_dict(spec_doc)
    if model is None:
        model = build_model(spec)
    elif spec_hash(model.spec) != spec_hash(spec):
        raise FormatError("checkpoint spec differs from the target model's spec")
    model.load_state_dict(state)
    return model
