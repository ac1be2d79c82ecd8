"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"BPTI" | u32 version | u32 section count
    per section: u32 name length | name | u32 tensor count | tensors
    per tensor:  u32 name length | name | u8 dtype tag | u8 rank | u32 extents... | raw data
"""

from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"BPTI"
VERSION = 1

DTYPE_TAGS = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
    np.dtype("<u8"): 4,
    np.dtype("<i4"): 5,
}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}

Sections = dict[str, dict[str, np.ndarray]]


class CheckpointError(ValueError):
    pass


def _name(buf: io.BytesIO, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def encode(sections: Sections) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(sections)))
    for sname, table in sections.items():
        _name(buf, sname)
        buf.write(struct.pack("<I", len(table)))
        for tname, arr in table.items():
            a = np.asarray(arr)
            dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
            if dt not in DTYPE_TAGS:
                raise CheckpointError(f"unsupported dtype {a.dtype} for {sname}/{tname}")
            _name(buf, tname)
            buf.write(struct.pack("<BB", DTYPE_TAGS[dt], a.ndim))
            buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
            buf.write(np.ascontiguousarray(a, dtype=dt.newbyteorder("<")).tobytes())
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def name(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def decode(data: bytes) -> Sections:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    sections: Sections = {}
    for _ in range(r.u32()):
        sname = r.name()
        table = {}
        for _ in range(r.u32()):
            tname = r.name()
            tag, rank = struct.unpack("<BB", r.take(2))
            if tag not in TAG_DTYPES:
                raise CheckpointError(f"unknown dtype tag {tag}")
            shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
            dt = TAG_DTYPES[tag]
            count = int(np.prod(shape, dtype=np.int64))
            raw = r.take(count * dt.itemsize)
            table[tname] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        sections[sname] = table
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint")
    return sections


def save(path, sections: Sections) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(sections)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> Sections:
    return decode(Path(path).read_bytes())
