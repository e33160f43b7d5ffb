"""Binary checkpoint container for named numeric arrays.

Layout (all integers little-endian):

    magic   5 bytes  b"FRVD1"
    version u16
    count   u32
    entries, repeated ``count`` times:
        name_len u32, name (UTF-8), dtype u8 (0=f32, 1=f64, 2=i64),
        rank u8, dims u64 * rank, raw little-endian array data
    crc32   u32 of every preceding byte

Entries are written in sorted-name order so equal contents always produce
equal bytes.  Name prefixes ("motion.", "backbone.", "wfm.") partition the
arrays between the pipeline stages.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"FRVD1"
FORMAT_VERSION = 1

_DTYPE_CODES = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
}
_CODE_DTYPES = {code: dt for dt, code in _DTYPE_CODES.items()}


def save_checkpoint(arrays: dict[str, np.ndarray], path) -> None:
    """Serialize ``arrays`` to ``path``; round-trips bit-exactly."""
    names = sorted(arrays)
    if len(names) != len(set(names)):
        raise CheckpointError("duplicate entry names")
    chunks = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(names))]
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for entry {name!r}")
        arr = arr.astype(dt, copy=False)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    payload = b"".join(chunks)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    Path(path).write_bytes(payload + struct.pack("<I", crc))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Load a checkpoint; raises CheckpointError on magic/CRC/layout problems."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 6 + 4:
        raise CheckpointError("checkpoint truncated")
    payload, crc_bytes = blob[:-4], blob[-4:]
    if payload[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file")
    (stored_crc,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError("CRC mismatch; checkpoint corrupt")

    off = len(MAGIC)
    version, count = struct.unpack_from("<HI", payload, off)
    off += 6
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")

    arrays: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", payload, off)
            off += 4
            name = payload[off : off + name_len].decode("utf-8")
            off += name_len
            code, rank = struct.unpack_from("<BB", payload, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}Q", payload, off)
            off += 8 * rank
            if code not in _CODE_DTYPES:
                raise CheckpointError(f"unknown dtype code {code}")
            dt = _CODE_DTYPES[code]
            nelems = 1
            for d in dims:
                nelems *= d
            arr = np.frombuffer(payload, dtype=dt, count=nelems, offset=off).reshape(dims)
            off += nelems * dt.itemsize
            if name in arrays:
                raise CheckpointError(f"duplicate entry name {name!r}")
            arrays[name] = arr.copy()
    except struct.error as exc:
        raise CheckpointError(f"checkpoint layout damaged: {exc}") from exc
    if off != len(payload):
        raise CheckpointError("trailing bytes after last entry")
    return arrays


def split_prefix(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    """Return the sub-dict under ``prefix`` with the prefix stripped."""
    return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}


def add_prefix(arrays: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {prefix + k: v for k, v in arrays.items()}
