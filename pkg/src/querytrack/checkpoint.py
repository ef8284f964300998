"""Binary checkpoint format.

Layout, all little-endian:

    magic   9 bytes   b"OVTR-CKPT"
    version u8        currently 1
    count   u32       number of tensor records
    record  repeated  u16 name length, name utf-8, u8 ndim,
                      u32 per dim, float64 data row-major
    textlen u32       length of trailing utf-8 text block (may be 0)
    text    bytes     category metadata, one "id<TAB>name<TAB>count<TAB>kind" line per row

Round-trips are bit-exact: float64 payloads go through tobytes/frombuffer
untouched, so NaN payloads and signed zeros survive.
"""

from __future__ import annotations

import struct
from typing import Dict, Tuple

import numpy as np

MAGIC = b"OVTR-CKPT"
VERSION = 1


def write_checkpoint(path: str, arrays: Dict[str, np.ndarray], text_block: str = "") -> None:
    chunks = [MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        # not ascontiguousarray: that would promote 0-dim scalars to (1,)
        arr = np.asarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            chunks.append(struct.pack("<I", dim))
        chunks.append(arr.astype("<f8", copy=False).tobytes())
    text = text_block.encode("utf-8")
    chunks.append(struct.pack("<I", len(text)))
    chunks.append(text)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def pull(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ValueError("truncated checkpoint file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self.pull(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.pull(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.pull(4))[0]


def read_checkpoint(path: str) -> Tuple[Dict[str, np.ndarray], str]:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.pull(len(MAGIC)) != MAGIC:
        raise ValueError(f"{path}: not a recognized checkpoint (bad magic)")
    version = r.u8()
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    count = r.u32()
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.pull(r.u16()).decode("utf-8")
        ndim = r.u8()
        shape = tuple(r.u32() for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.pull(size * 8), dtype="<f8").reshape(shape)
        arrays[name] = np.array(data, dtype=np.float64)  # own, writable copy
    text = r.pull(r.u32()).decode("utf-8")
    if r.pos != len(blob):
        raise ValueError(f"{path}: trailing bytes after checkpoint payload")
    return arrays, text
