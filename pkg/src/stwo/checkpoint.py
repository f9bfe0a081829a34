"""Binary checkpoint container: magic, JSON header, raw tensor payload, CRC.

Layout, all integers little-endian:

    bytes 0..3    magic b"STWO"
    bytes 4..7    format version (u32)
    bytes 8..15   header length in bytes (u64)
    ...           header: canonical JSON (sorted keys, no whitespace)
    ...           payload: tensor data at the offsets in the header table
    last 4        CRC32 of the payload (u32)

The header carries ``meta`` (arbitrary JSON from the caller) and ``tensors``,
a list of {name, dtype, shape, offset} entries in payload order.  Identical
inputs serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import FormatError

MAGIC = b"STWO"
VERSION = 1

_ALLOWED_DTYPES = {"<f4", "<f8", "<i8"}


def write_blob(path: str, meta: dict, tensors: list) -> None:
    """``tensors`` is a list of (name, ndarray) in the order to serialize."""
    table = []
    chunks = []
    offset = 0
    seen = set()
    for name, arr in tensors:
        if name in seen:
            raise FormatError(f"write_blob: duplicate tensor name {name!r}")
        seen.add(name)
        a = np.asarray(arr)
        dt = a.dtype.newbyteorder("<")
        if dt.str not in _ALLOWED_DTYPES:
            raise FormatError(f"write_blob: unsupported dtype {a.dtype} for {name!r}")
        raw = np.ascontiguousarray(a, dtype=dt).tobytes()
        table.append({"name": name, "dtype": dt.str,
                      "shape": list(a.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": table},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload)))


def read_blob(path: str) -> tuple:
    """Returns (meta, {name: ndarray}).  Any structural damage -> FormatError."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise FormatError("read_blob: bad magic, not a checkpoint file")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != VERSION:
        raise FormatError(f"read_blob: unsupported version {version}")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    if 16 + hlen + 4 > len(buf):
        raise FormatError("read_blob: truncated header")
    try:
        header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"read_blob: corrupt header ({exc})") from exc
    if not isinstance(header, dict) or "meta" not in header or "tensors" not in header:
        raise FormatError("read_blob: header missing required fields")
    payload = buf[16 + hlen:-4]
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(payload) != crc:
        raise FormatError("read_blob: payload checksum mismatch")
    tensors = {}
    for entry in header["tensors"]:
        try:
            name, dts, shape, off = (entry["name"], entry["dtype"],
                                     entry["shape"], entry["offset"])
        except (TypeError, KeyError) as exc:
            raise FormatError(f"read_blob: malformed table entry {entry!r}") from exc
        if dts not in _ALLOWED_DTYPES:
            raise FormatError(f"read_blob: unsupported dtype {dts!r}")
        dt = np.dtype(dts)
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if off < 0 or off + size > len(payload):
            raise FormatError(f"read_blob: tensor {name!r} overruns payload")
        arr = np.frombuffer(payload, dtype=dt, count=int(np.prod(shape, dtype=np.int64)),
                            offset=off).reshape(shape)
        tensors[name] = arr.copy()
    return header["meta"], tensors
