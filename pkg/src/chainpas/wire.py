"""Length-prefixed binary encoding primitives.

Every on-wire and on-disk structure (transaction envelopes, blocks, state
records, peer frames) is built from these helpers so that serialization is
bit-exact and field-ordered; see docs/wire-format.md for the layouts.
"""

from __future__ import annotations

import struct


class WireError(ValueError):
    """Malformed or truncated wire bytes."""


def put_u8(value: int) -> bytes:
    return struct.pack(">B", value)


def put_u16(value: int) -> bytes:
    return struct.pack(">H", value)


def put_u32(value: int) -> bytes:
    return struct.pack(">I", value)


def put_u64(value: int) -> bytes:
    return struct.pack(">Q", value)


def put_f64(value: float) -> bytes:
    return struct.pack(">d", value)


def put_bytes(value: bytes) -> bytes:
    # u32 length prefix, then raw bytes
    return put_u32(len(value)) + value


def put_str(value: str) -> bytes:
    return put_bytes(value.encode("utf-8"))


class Reader:
    """Sequential decoder over one immutable buffer."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    @property
    def remaining(self) -> int:
        return len(self._data) - self._pos

    def _take(self, n: int) -> bytes:
        if self.remaining < n:
            raise WireError(f"truncated: need {n} bytes, have {self.remaining}")
        chunk = self._data[self._pos : self._pos + n]
        self._pos += n
        return chunk

    def u8(self) -> int:
        return struct.unpack(">B", self._take(1))[0]

    def u16(self) -> int:
        return struct.unpack(">H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack(">I", self._take(4))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack(">d", self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def bytes_(self) -> bytes:
        return self._take(self.u32())

    def str_(self) -> str:
        try:
            return self.bytes_().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WireError("invalid utf-8 in string field") from exc

    def expect_end(self) -> None:
        if self.remaining:
            raise WireError(f"{self.remaining} trailing bytes")
