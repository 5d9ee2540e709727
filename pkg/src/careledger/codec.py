"""Canonical byte encoding primitives.

Layout rules, applied by every composite encoder in the package:
  * unsigned integers are big-endian, fixed width (u8, u32, u64)
  * strings are UTF-8 bytes prefixed by a 4-byte big-endian length
  * digests, keys, salts, signatures are raw fixed-width bytes
  * sequences are a u32 count followed by the elements
  * optional values are a presence byte (0/1) followed by the value

The same field sequence always produces the same bytes on every platform;
there is no map ordering, padding, or float representation anywhere.
"""

from __future__ import annotations

from .errors import EncodingError

MAX_STRING = 4096


class Writer:
    __slots__ = ("_parts",)

    def __init__(self) -> None:
        self._parts: list[bytes] = []

    def u8(self, value: int) -> None:
        if not 0 <= value <= 0xFF:
            raise EncodingError(f"u8 out of range: {value}")
        self._parts.append(value.to_bytes(1, "big"))

    def u32(self, value: int) -> None:
        if not 0 <= value <= 0xFFFFFFFF:
            raise EncodingError(f"u32 out of range: {value}")
        self._parts.append(value.to_bytes(4, "big"))

    def u64(self, value: int) -> None:
        if not 0 <= value <= 0xFFFFFFFFFFFFFFFF:
            raise EncodingError(f"u64 out of range: {value}")
        self._parts.append(value.to_bytes(8, "big"))

    def raw(self, data: bytes, width: int) -> None:
        if len(data) != width:
            raise EncodingError(f"expected {width} raw bytes, got {len(data)}")
        self._parts.append(data)

    def string(self, value: str, bound: int = MAX_STRING) -> None:
        data = value.encode("utf-8")
        if len(data) > bound:
            raise EncodingError(f"string exceeds {bound} byte bound")
        self.u32(len(data))
        self._parts.append(data)

    def boolean(self, value: bool) -> None:
        self.u8(1 if value else 0)

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    __slots__ = ("_data", "_pos")

    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0

    def _take(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._data):
            raise EncodingError("input truncated")
        chunk = self._data[self._pos : end]
        self._pos = end
        return chunk

    def u8(self) -> int:
        return self._take(1)[0]

    def u32(self) -> int:
        return int.from_bytes(self._take(4), "big")

    def u64(self) -> int:
        return int.from_bytes(self._take(8), "big")

    def raw(self, width: int) -> bytes:
        return self._take(width)

    def string(self, bound: int = MAX_STRING) -> str:
        n = self.u32()
        if n > bound:
            raise EncodingError(f"string exceeds {bound} byte bound")
        try:
            return self._take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise EncodingError("invalid UTF-8 in string field") from exc

    def boolean(self) -> bool:
        flag = self.u8()
        if flag not in (0, 1):
            raise EncodingError(f"invalid boolean byte {flag}")
        return flag == 1

    def remaining(self) -> int:
        return len(self._data) - self._pos

    def expect_end(self) -> None:
        if self._pos != len(self._data):
            raise EncodingError(f"{self.remaining()} trailing bytes after value")
