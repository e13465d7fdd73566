"""Little-endian record reading/writing shared by checkpoint and dataset files."""
from __future__ import annotations

import struct

import numpy as np

from .errors import FileFormatError, TruncatedFileError, VersionMismatchError


class Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFileError(
                f"file truncated: needed {n} bytes at offset {self.pos}, {len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def u32(self) -> int:
        return self.unpack("I")[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()

    def header(self, magic: bytes, version: int) -> None:
        got = self.buf[:len(magic)]
        if got != magic:
            raise FileFormatError(f"bad magic bytes {got!r}, expected {magic!r}")
        self.take(len(magic))
        v = self.u32()
        if v != version:
            raise VersionMismatchError(f"format version {v} is not supported (expected {version})")

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FileFormatError(f"{len(self.buf) - self.pos} trailing bytes after last record")


def pack_u32(*values: int) -> bytes:
    return struct.pack("<" + "I" * len(values), *values)
