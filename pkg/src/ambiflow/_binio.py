"""Little-endian binary file helpers with running CRC32 and typed errors."""

import struct
import zlib

import numpy as np

from .errors import ChecksumError, FileFormatError, TruncatedFileError, VersionMismatchError


class Writer:
    """Sequential writer that tracks a CRC32 over everything written."""

    def __init__(self, fh):
        self.fh = fh
        self.crc = 0

    def raw(self, b):
        self.fh.write(b)
        self.crc = zlib.crc32(b, self.crc)

    def u8(self, v):
        self.raw(struct.pack("<B", v))

    def u32(self, v):
        self.raw(struct.pack("<I", v))

    def u64(self, v):
        self.raw(struct.pack("<Q", v))

    def i64(self, v):
        self.raw(struct.pack("<q", v))

    def f64(self, v):
        self.raw(struct.pack("<d", v))

    def array(self, a, dtype="<f8"):
        self.raw(np.ascontiguousarray(a, dtype=dtype).tobytes())

    def finish_crc(self):
        # trailing checksum, not itself covered by the CRC
        self.fh.write(struct.pack("<I", self.crc))


class Reader:
    """Sequential reader mirroring Writer; raises typed errors."""

    def __init__(self, fh):
        self.fh = fh
        self.crc = 0

    def raw(self, n):
        b = self.fh.read(n)
        if len(b) != n:
            raise TruncatedFileError(f"expected {n} bytes, got {len(b)}")
        self.crc = zlib.crc32(b, self.crc)
        return b

    def u8(self):
        return struct.unpack("<B", self.raw(1))[0]

    def u32(self):
        return struct.unpack("<I", self.raw(4))[0]

    def u64(self):
        return struct.unpack("<Q", self.raw(8))[0]

    def i64(self):
        return struct.unpack("<q", self.raw(8))[0]

    def f64(self):
        return struct.unpack("<d", self.raw(8))[0]

    def array(self, count, dtype="<f8"):
        b = self.raw(count * np.dtype(dtype).itemsize)
        return np.frombuffer(b, dtype=dtype).astype(np.float64)

    def array_raw(self, count, dtype):
        b = self.raw(count * np.dtype(dtype).itemsize)
        return np.frombuffer(b, dtype=dtype).copy()

    def expect_magic(self, magic, version, what):
        got = self.raw(len(magic))
        if got != magic:
            raise FileFormatError(f"not a {what} file (magic {got!r})")
        ver = self.u32()
        if ver != version:
            raise VersionMismatchError(f"{what} file version {ver}, supported {version}")

    def check_crc(self):
        stored = self.fh.read(4)
        if len(stored) != 4:
            raise TruncatedFileError("missing trailing checksum")
        if struct.unpack("<I", stored)[0] != self.crc:
            raise ChecksumError("stored checksum does not match content")
