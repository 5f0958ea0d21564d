"""MARKCKPT binary container: named float32 tensors.

Layout (all little-endian)::

    b"MARKCKPT"  u16 version (=1)  u32 count
    count x { u16 name_len, name (UTF-8), u8 rank, rank x u32 dim, f32 data }
"""
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError, LengthError, UnsupportedVersionError

MAGIC = b"MARKCKPT"
VERSION = 1


def encode(tensors) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4", order="C")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise FormatError(f"tensor {name!r} cannot be encoded (name or rank too large)")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(raw: bytes, path="<bytes>"):
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic at byte offset 0, expected {MAGIC!r}")
    if len(raw) < 14:
        raise LengthError(f"{path}: truncated header")
    version, count = struct.unpack_from("<HI", raw, 8)
    if version != VERSION:
        raise UnsupportedVersionError(f"{path}: checkpoint version {version} is not supported (expected {VERSION})")
    pos, out = 14, {}

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise LengthError(f"{path}: truncated at byte offset {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"{path}: tensor name at offset {pos - name_len} is not UTF-8") from None
        if name in out:
            raise FormatError(f"{path}: duplicate tensor name {name!r}")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if pos != len(raw):
        raise LengthError(f"{path}: {len(raw) - pos} trailing bytes after {count} tensors")
    return out


def atomic_write(path, data: bytes):
    """Write via a temporary file in the same directory, then rename into place."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(tensors, path):
    atomic_write(path, encode(tensors))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode(fh.read(), path)
