"""Canonical length-prefixed binary encoding.

Every hashed or signed structure in the package goes through :class:`Writer`
and is read back with :class:`Reader`.  Layout rules:

* unsigned integers: 8 bytes big-endian (``u64``) or 1 byte (``u8``)
* byte strings and text: 4-byte big-endian length, then the raw bytes
* sequences: 4-byte big-endian count, then each item
* optional values: one flag byte (0 absent, 1 present), then the value

The reader is strict: unknown flag values, short buffers and trailing bytes
all raise :class:`DecodeError`, so a single mutated byte never decodes to a
different-but-valid structure by accident.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Optional, TypeVar

T = TypeVar("T")

_U32 = struct.Struct(">I")
_U64 = struct.Struct(">Q")

MAX_LEN = 1 << 24


class DecodeError(ValueError):
    """Raised when bytes do not form a canonical encoding."""


class Writer:
    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, value: int) -> "Writer":
        if not 0 <= value < 256:
            raise ValueError(f"u8 out of range: {value}")
        self._parts.append(bytes((value,)))
        return self

    def u64(self, value: int) -> "Writer":
        if not 0 <= value < 1 << 64:
            raise ValueError(f"u64 out of range: {value}")
        self._parts.append(_U64.pack(value))
        return self

    def bytes(self, value: bytes) -> "Writer":
        self._parts.append(_U32.pack(len(value)))
        self._parts.append(bytes(value))
        return self

    def str(self, value: str) -> "Writer":
        return self.bytes(value.encode("utf-8"))

    def seq(self, items: Iterable[T], write_item: Callable[["Writer", T], object]) -> "Writer":
        items = list(items)
        self._parts.append(_U32.pack(len(items)))
        for item in items:
            write_item(self, item)
        return self

    def optional(self, value: Optional[T], write_item: Callable[["Writer", T], object]) -> "Writer":
        if value is None:
            return self.u8(0)
        self.u8(1)
        write_item(self, value)
        return self

    def raw(self, data: bytes) -> "Writer":
        self._parts.append(bytes(data))
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    def __init__(self, data: bytes) -> None:
        self._data = memoryview(bytes(data))
        self._pos = 0

    def _take(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._data):
            raise DecodeError(f"truncated: need {n} bytes at offset {self._pos}")
        out = self._data[self._pos:end].tobytes()
        self._pos = end
        return out

    def u8(self) -> int:
        return self._take(1)[0]

    def u64(self) -> int:
        return _U64.unpack(self._take(8))[0]

    def bytes(self, size: Optional[int] = None) -> bytes:
        (n,) = _U32.unpack(self._take(4))
        if n > MAX_LEN:
            raise DecodeError(f"length {n} exceeds limit")
        if size is not None and n != size:
            raise DecodeError(f"expected {size} bytes, got {n}")
        return self._take(n)

    def str(self) -> str:
        try:
            return self.bytes().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError("invalid utf-8") from exc

    def seq(self, read_item: Callable[["Reader"], T]) -> list[T]:
        (n,) = _U32.unpack(self._take(4))
        if n > MAX_LEN:
            raise DecodeError(f"count {n} exceeds limit")
        return [read_item(self) for _ in range(n)]

    def optional(self, read_item: Callable[["Reader"], T]) -> Optional[T]:
        flag = self.u8()
        if flag == 0:
            return None
        if flag != 1:
            raise DecodeError(f"bad optional flag {flag}")
        return read_item(self)

    def enum(self, enum_cls):
        value = self.u8()
        try:
            return enum_cls(value)
        except ValueError as exc:
            raise DecodeError(f"bad {enum_cls.__name__} value {value}") from exc

    def done(self) -> None:
        if self._pos != len(self._data):
            raise DecodeError(f"{len(self._data) - self._pos} trailing bytes")


def decode_all(data: bytes, read: Callable[[Reader], T]) -> T:
    """Decode ``data`` completely with ``read``; trailing bytes are an error."""
    reader = Reader(data)
    value = read(reader)
    reader.done()
    return value
