"""Binary checkpoint container.

Layout: magic b"FSAP", u32 version, 32-byte config digest, u32 tensor count,
then per tensor: u16 name length, utf-8 name, u8 ndim, u32 dims, raw
row-major little-endian float32 data. Values are stored exactly as float32,
so save -> load round-trips bit-exactly for float32 models.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"FSAP"
VERSION = 1
DIGEST_LEN = 32


def save_checkpoint(path, arrays: dict[str, np.ndarray], config_digest: bytes) -> None:
    if len(config_digest) != DIGEST_LEN:
        raise FormatError(f"config digest must be {DIGEST_LEN} bytes")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(config_digest)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            data = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
            if data.ndim and not data.flags.c_contiguous:
                data = np.ascontiguousarray(data)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            for dim in data.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(data.tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], bytes]:
    """Read all named tensors; returns (arrays, config digest)."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise FormatError(f"{path}: not a FSAP checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        digest = _read_exact(fh, DIGEST_LEN)
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim))
            n_items = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, 4 * n_items)
            arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after last tensor")
    return arrays, digest
