"""Carry-less 32-bit range coder plus the framed-stream wrapper.

The coder emits the top byte whenever it has settled and resolves
potential carries by shrinking the range at the 16-bit boundary, so no
carry propagation into already-emitted bytes can occur. Symbols are coded
against cumulative frequency tables whose totals must stay below the
bottom boundary.
"""

from __future__ import annotations

import struct
import zlib

from .errors import DataError, UsageError

TOP = 1 << 24
BOT = 1 << 16
_MASK = (1 << 32) - 1


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK
        self.out = bytearray()

    def encode(self, cum: int, freq: int, total: int) -> None:
        if freq <= 0 or cum < 0 or cum + freq > total:
            raise UsageError("invalid frequency interval")
        if total > BOT:
            raise UsageError(f"table total {total} exceeds {BOT}")
        r = self.range // total
        self.low = (self.low + r * cum) & _MASK
        self.range = r * freq
        self._normalize()

    def _normalize(self):
        while True:
            if ((self.low ^ (self.low + self.range)) & _MASK) >= TOP:
                if self.range >= BOT:
                    break
                # Carry hazard: clamp the range so the top byte settles.
                self.range = (-self.low) & (BOT - 1)
            self.out.append((self.low >> 24) & 0xFF)
            self.low = (self.low << 8) & _MASK
            self.range = (self.range << 8) & _MASK

    def finish(self) -> bytes:
        for _ in range(4):
            self.out.append((self.low >> 24) & 0xFF)
            self.low = (self.low << 8) & _MASK
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.low = 0
        self.range = _MASK
        self.code = 0
        for _ in range(4):
            self.code = ((self.code << 8) | self._byte()) & _MASK

    def _byte(self) -> int:
        b = self.data[self.pos] if self.pos < len(self.data) else 0
        self.pos += 1
        return b

    def decode_freq(self, total: int) -> int:
        r = self.range // total
        f = ((self.code - self.low) & _MASK) // r
        return min(f, total - 1)

    def decode_update(self, cum: int, freq: int, total: int) -> None:
        r = self.range // total
        self.low = (self.low + r * cum) & _MASK
        self.range = r * freq
        while True:
            if ((self.low ^ (self.low + self.range)) & _MASK) >= TOP:
                if self.range >= BOT:
                    break
                self.range = (-self.low) & (BOT - 1)
            self.code = ((self.code << 8) | self._byte()) & _MASK
            self.low = (self.low << 8) & _MASK
            self.range = (self.range << 8) & _MASK


_FRAME = struct.Struct("<II")


def pack_stream(payload: bytes) -> bytes:
    """Frame a payload as [u32 length][u32 crc32][payload], little-endian."""
    return _FRAME.pack(len(payload), zlib.crc32(payload)) + payload


def unpack_stream(buf: bytes, offset: int = 0) -> tuple[bytes, int]:
    """Read one framed payload; returns (payload, next offset)."""
    if offset + _FRAME.size > len(buf):
        raise DataError("truncated stream header")
    length, crc = _FRAME.unpack_from(buf, offset)
    start = offset + _FRAME.size
    end = start + length
    if end > len(buf):
        raise DataError("truncated stream payload")
    payload = bytes(buf[start:end])
    if zlib.crc32(payload) != crc:
        raise DataError("stream checksum mismatch")
    return payload, end
