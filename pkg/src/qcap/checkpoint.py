"""Versioned binary container for named float64 parameter arrays.

Layout (little-endian)::

    magic      4 bytes
    format     u32
    config     u32 length + UTF-8 JSON (sorted keys)
    count      u32
    count x    u16 name length, name, u32 ndim, ndim x u32 extent, float64 values
"""

from __future__ import annotations

import json
import struct

import numpy as np

FORMAT_VERSION = 1
CAPTIONER_MAGIC = b"IQCK"
BASELINE_MAGIC = b"IQBL"


def save_checkpoint(path, magic: bytes, config: dict, state: dict[str, np.ndarray]):
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    parts = [magic, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", len(state))]
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path, expect_magic: bytes | None = None):
    """Return ``(magic, config, state)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic = raw[:4]
    if expect_magic is not None and magic != expect_magic:
        raise ValueError(f"{path}: magic {magic!r}, expected {expect_magic!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {version}")
    (cfg_len,) = struct.unpack_from("<I", raw, 8)
    pos = 12
    config = json.loads(raw[pos:pos + cfg_len])
    pos += cfg_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + name_len].decode()
        pos += name_len
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes in checkpoint")
    return magic, config, state
