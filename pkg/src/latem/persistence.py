"""Binary model persistence (the LATEM1 file format).

Layout, all little-endian:

    bytes 0..6    magic ``LATEM1``
    <III          d_x, d_y, K
    d_x float64   normalization mean
    d_x float64   normalization std
    K*d_x*d_y f64 matrices, row-major
    <Q            metadata length in bytes
    ...           metadata, UTF-8 JSON (sorted keys)

Declared sizes must match the payload exactly; trailing bytes are an error.
Models without normalization stats store zeros/ones and record the absence
in the metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .data import NormStats
from .errors import FormatError
from .fileio import atomic_write_bytes
from .model import LatentModel

MAGIC = b"LATEM1"
_HEADER = struct.Struct("<III")
_META_LEN = struct.Struct("<Q")


def save_model(model: LatentModel, path: str | Path) -> None:
    """Serialize a model; the write is atomic (temp file + rename)."""
    d_x, d_y, k = model.d_x, model.d_y, model.k
    if model.norm_stats is not None:
        mean = model.norm_stats.mean
        std = model.norm_stats.std
        has_stats = True
    else:
        mean = np.zeros(d_x)
        std = np.ones(d_x)
        has_stats = False
    meta = dict(model.metadata)
    meta["has_norm_stats"] = has_stats
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [
        MAGIC,
        _HEADER.pack(d_x, d_y, k),
        np.ascontiguousarray(mean, dtype="<f8").tobytes(),
        np.ascontiguousarray(std, dtype="<f8").tobytes(),
        np.ascontiguousarray(model.matrices, dtype="<f8").tobytes(),
        _META_LEN.pack(len(meta_bytes)),
        meta_bytes,
    ]
    atomic_write_bytes(path, b"".join(parts))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated model file while reading {what}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out


def load_model(path: str | Path) -> LatentModel:
    """Load a LATEM1 file; round-trips ``save_model`` output bit-exactly."""
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        if magic[:5] == MAGIC[:5]:
            raise FormatError(
                f"unsupported version '{magic.decode('ascii', errors='replace')}'"
            )
        raise FormatError("not a LATEM1 file")
    d_x, d_y, k = _HEADER.unpack(r.take(_HEADER.size, "header"))
    if min(d_x, d_y, k) < 1:
        raise FormatError(f"invalid header dimensions ({d_x}, {d_y}, {k})")
    mean = np.frombuffer(r.take(8 * d_x, "mean vector"), dtype="<f8").astype(np.float64)
    std = np.frombuffer(r.take(8 * d_x, "std vector"), dtype="<f8").astype(np.float64)
    mats = np.frombuffer(
        r.take(8 * k * d_x * d_y, "matrices"), dtype="<f8"
    ).astype(np.float64)
    (meta_len,) = _META_LEN.unpack(r.take(_META_LEN.size, "metadata length"))
    meta_bytes = r.take(meta_len, "metadata")
    if r.pos != len(blob):
        raise FormatError(f"size mismatch: {len(blob) - r.pos} trailing bytes")
    try:
        meta = json.loads(meta_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt metadata block: {exc}") from None
    has_stats = meta.pop("has_norm_stats", True)
    stats = NormStats(mean, std) if has_stats else None
    return LatentModel(mats.reshape(k, d_x, d_y), stats, meta)
