"""Named-tensor checkpoint container.

Layout, all little-endian::

    b"SCDL" | u32 version | u32 tensor count
    repeated: u32 name length | UTF-8 name | u8 dtype (0=f64, 1=f32) | u8 rank
              | u64 dims[rank] | row-major payload
    u32 CRC32 over every byte of the tensor records
"""
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"SCDL"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}


class CheckpointError(ValueError):
    pass


def encode(tensors, dtype="f64"):
    """Serialise a name -> array mapping. ``dtype`` is "f64" or "f32"."""
    if dtype not in ("f64", "f32"):
        raise ValueError(f"unsupported storage dtype {dtype!r}")
    store = np.dtype("<f8") if dtype == "f64" else np.dtype("<f4")
    body = bytearray()
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=store, order="C")
        raw_name = name.encode("utf-8")
        body += struct.pack("<I", len(raw_name)) + raw_name
        body += struct.pack("<BB", _CODES[store], arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += arr.tobytes()
    header = MAGIC + struct.pack("<II", VERSION, len(tensors))
    return header + bytes(body) + struct.pack("<I", zlib.crc32(body))


def decode(raw):
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError("not an SCDL checkpoint")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    body = raw[12:-4]
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC mismatch: checkpoint is corrupt")
    out = {}
    off = 0
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, off)
            off += 4
            name = bytes(body[off:off + n]).decode("utf-8")
            off += n
            code, rank = struct.unpack_from("<BB", body, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}Q", body, off)
            off += 8 * rank
            dt = _DTYPES[code]
            size = int(np.prod(dims, dtype=np.int64))
            out[name] = np.frombuffer(body, dtype=dt, count=size, offset=off).reshape(dims).copy()
            off += size * dt.itemsize
    except (struct.error, KeyError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if off != len(body):
        raise CheckpointError("trailing bytes after the declared tensors")
    return out


def save(path, tensors, dtype="f64"):
    Path(path).write_bytes(encode(tensors, dtype))


def load(path):
    return decode(Path(path).read_bytes())
