"""Binary checkpoint container.

Little-endian layout: magic ``SCFG``, format version (u32), then named
chunks. Each chunk is: name length (u16), name bytes, payload length (u64),
payload, CRC32 of the payload (u32). Loading length-checks every read and
verifies CRCs, so truncated or corrupted files fail with IntegrityError
instead of crashing. Round trips are bit-exact.
"""

from __future__ import annotations

import io
import json
import struct
import zlib

import numpy as np

from .errors import IntegrityError

MAGIC = b"SCFG"
FORMAT_VERSION = 1


def _pack_arrays(arrays):
    """Serialize an ordered {name: ndarray} mapping to bytes."""
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        name_b = name.encode("utf-8")
        dtype_b = arr.dtype.str.encode("ascii")
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<B", len(dtype_b)))
        buf.write(dtype_b)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<Q", dim))
        raw = arr.tobytes()
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
    return buf.getvalue()


class _Reader:
    def __init__(self, data, label):
        self.data = data
        self.pos = 0
        self.label = label

    def take(self, n):
        if self.pos + n > len(self.data):
            raise IntegrityError(f"{self.label}: truncated (wanted {n} bytes at {self.pos})")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def exhausted(self):
        return self.pos >= len(self.data)


def _unpack_arrays(data, label):
    r = _Reader(data, label)
    (count,) = r.unpack("<I")
    out = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (dlen,) = r.unpack("<B")
        dtype = np.dtype(r.take(dlen).decode("ascii"))
        (ndim,) = r.unpack("<B")
        shape = tuple(r.unpack("<" + "Q" * ndim)) if ndim else ()
        (nbytes,) = r.unpack("<Q")
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape).copy()
        out[name] = arr
    return out


def write_container(path, chunks):
    """Write named chunks ({name: bytes}) with per-chunk CRC32."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for name, payload in chunks.items():
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)
            fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


def read_container(path):
    """Read and verify a container; returns {name: payload bytes}."""
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, str(path))
    magic = r.take(4)
    if magic != MAGIC:
        raise IntegrityError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise IntegrityError(
            f"{path}: format version {version} unsupported (this build reads {FORMAT_VERSION})"
        )
    chunks = {}
    while not r.exhausted:
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (plen,) = r.unpack("<Q")
        payload = r.take(plen)
        (crc,) = r.unpack("<I")
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise IntegrityError(f"{path}: CRC mismatch in chunk '{name}'")
        chunks[name] = payload
    return chunks


def pack_json(obj):
    return json.dumps(obj, sort_keys=True).encode("utf-8")


def unpack_json(payload, label):
    try:
        return json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{label}: corrupt JSON chunk: {exc}") from exc


pack_arrays = _pack_arrays
unpack_arrays = _unpack_arrays
