"""Shared plumbing for the checksummed binary formats."""
from __future__ import annotations

import struct
import zlib


class FormatError(ValueError):
    """Base class for unreadable store or checkpoint files."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"file ends at byte {len(self.data)}, needed {self.pos + n}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def verify_trailer(self) -> None:
        """Check that exactly a CRC32 of everything before it remains."""
        left = self.remaining()
        if left < 4:
            raise TruncatedFileError("missing checksum trailer")
        if left > 4:
            raise ChecksumError(f"{left - 4} unexpected trailing bytes")
        (stored,) = self.unpack("<I")
        if zlib.crc32(self.data[:-4]) != stored:
            raise ChecksumError("payload checksum mismatch")


def with_crc(payload: bytes) -> bytes:
    return payload + struct.pack("<I", zlib.crc32(payload))
