"""Binary container for named tensors with per-section integrity checks.

Layout (all integers little-endian):

    magic "FNGI" | version u16 | section count u32
    per section:
        name length u16 | name bytes (utf-8)
        dtype tag u8 | rank u8 | extents u64 * rank
        payload length u64 | payload bytes | crc32 u32

The crc covers the payload only. Sections whose dtype tag is unknown are
skipped on read, so newer writers stay compatible with older readers.
Writes go through a temp file and an atomic rename.
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

MAGIC = b"FNGI"
FORMAT_VERSION = 1

_DTYPE_TAGS = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.uint8): 2,
    np.dtype(np.int32): 3,
}
_TAG_DTYPES = {tag: dt for dt, tag in _DTYPE_TAGS.items()}


class StoreError(ValueError):
    """Malformed or corrupted tensor-store file."""


def _coerce(array):
    array = np.ascontiguousarray(array)
    if array.dtype in _DTYPE_TAGS:
        return array
    if np.issubdtype(array.dtype, np.integer):
        return array.astype(np.int32)
    if np.issubdtype(array.dtype, np.floating):
        return array.astype(np.float64)
    raise StoreError(f"unsupported dtype {array.dtype}")


def encode_text(text):
    """Text payloads are stored as u8 sections."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def decode_text(array):
    return bytes(np.asarray(array, dtype=np.uint8)).decode("utf-8")


def write_sections(path, sections, version=FORMAT_VERSION):
    """Write an ordered mapping name -> ndarray; atomic replace on success."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<HI", version, len(sections))
    for name, array in sections.items():
        array = _coerce(array)
        name_b = name.encode("utf-8")
        payload = array.tobytes()
        blob += struct.pack("<H", len(name_b)) + name_b
        blob += struct.pack("<BB", _DTYPE_TAGS[array.dtype], array.ndim)
        blob += struct.pack(f"<{array.ndim}Q", *array.shape)
        blob += struct.pack("<Q", len(payload))
        blob += payload
        blob += struct.pack("<I", zlib.crc32(payload))
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


def read_sections(path):
    """Read a tensor-store file into an ordered dict name -> ndarray."""
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    if data[:4] != MAGIC:
        raise StoreError(f"{path}: bad magic")
    version, count = struct.unpack_from("<HI", view, 4)
    if version > FORMAT_VERSION:
        raise StoreError(f"{path}: unsupported format version {version}")
    offset = 10
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", view, offset)
        offset += 2
        name = bytes(view[offset : offset + name_len]).decode("utf-8")
        offset += name_len
        tag, rank = struct.unpack_from("<BB", view, offset)
        offset += 2
        shape = struct.unpack_from(f"<{rank}Q", view, offset)
        offset += 8 * rank
        (payload_len,) = struct.unpack_from("<Q", view, offset)
        offset += 8
        payload = view[offset : offset + payload_len]
        offset += payload_len
        (crc,) = struct.unpack_from("<I", view, offset)
        offset += 4
        if zlib.crc32(payload) != crc:
            raise StoreError(f"{path}: crc mismatch in section {name!r}")
        if tag not in _TAG_DTYPES:
            continue  # unknown dtype: validated, then skipped
        dtype = _TAG_DTYPES[tag]
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if payload_len != expected:
            raise StoreError(f"{path}: payload length mismatch in section {name!r}")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if offset != len(data):
        raise StoreError(f"{path}: trailing bytes after last section")
    return out
