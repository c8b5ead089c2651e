"""Keys, versioned entries, key ranges and the on-disk entry record.

Keys are raw byte strings ordered by unsigned byte value, which is exactly
how Python compares ``bytes``.  Internally the engine moves entries around
as pre-encoded *records* so that compaction never re-encodes a pair::

    [op u8][seq u64 LE][key_len u32 LE][key][value_len u32 LE][value]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple

from .errors import InvalidKey

MAX_KEY_LEN = 1024
MAX_SEQ = (1 << 64) - 1

_HEAD = struct.Struct("<BQI")
_VLEN = struct.Struct("<I")
RECORD_OVERHEAD = _HEAD.size + _VLEN.size  # 17 bytes per record


class Op(IntEnum):
    DELETE = 0
    PUT = 1


class Entry(NamedTuple):
    key: bytes
    seq: int
    op: Op
    value: bytes = b""

    @classmethod
    def put(cls, key: bytes, seq: int, value: bytes) -> "Entry":
        return cls(key, seq, Op.PUT, value)

    @classmethod
    def delete(cls, key: bytes, seq: int) -> "Entry":
        return cls(key, seq, Op.DELETE, b"")

    @property
    def is_delete(self) -> bool:
        return self.op == Op.DELETE


def validate_key(key: bytes) -> bytes:
    if not isinstance(key, (bytes, bytearray)):
        raise InvalidKey(f"key must be bytes, got {type(key).__name__}")
    if not 1 <= len(key) <= MAX_KEY_LEN:
        raise InvalidKey(f"key length {len(key)} outside 1..{MAX_KEY_LEN}")
    return bytes(key)


def entry_sort_key(e: Entry) -> tuple[bytes, int]:
    """Sort key realising :func:`compare_entries` (key asc, newest first)."""
    return (e.key, -e.seq)


def compare_entries(a: Entry, b: Entry) -> int:
    """Three-way comparison: key ascending, then seq descending."""
    if a.key != b.key:
        return -1 if a.key < b.key else 1
    if a.seq != b.seq:
        return -1 if a.seq > b.seq else 1
    return 0


@dataclass(frozen=True, slots=True)
class KeyRange:
    """Inclusive key interval ``[min, max]``."""

    min: bytes
    max: bytes

    def __post_init__(self) -> None:
        if self.min > self.max:
            raise ValueError(f"KeyRange min {self.min!r} > max {self.max!r}")

    def intersects(self, other: "KeyRange") -> bool:
        return self.min <= other.max and other.min <= self.max

    def contains(self, key: bytes) -> bool:
        return self.min <= key <= self.max

    def union(self, other: "KeyRange") -> "KeyRange":
        return KeyRange(min(self.min, other.min), max(self.max, other.max))


def ranges_intersect(a: KeyRange, b: KeyRange) -> bool:
    return a.min <= b.max and b.min <= a.max


# -- records -----------------------------------------------------------------


def encode_record(key: bytes, seq: int, op: int, value: bytes) -> bytes:
    return b"".join((_HEAD.pack(op, seq, len(key)), key, _VLEN.pack(len(value)), value))


def encode_entry(e: Entry) -> bytes:
    return encode_record(e.key, e.seq, e.op, e.value)


def record_seq(rec: bytes) -> int:
    return int.from_bytes(rec[1:9], "little")


def record_is_delete(rec: bytes) -> bool:
    return rec[0] == Op.DELETE


def record_value(rec: bytes) -> bytes:
    klen = int.from_bytes(rec[9:13], "little")
    return rec[17 + klen :]


def decode_record(rec: bytes) -> Entry:
    op, seq, klen = _HEAD.unpack_from(rec, 0)
    key = rec[13 : 13 + klen]
    return Entry(key, seq, Op(op), rec[17 + klen :])


def split_records(buf: bytes | memoryview, offset: int = 0, end: int | None = None) -> tuple[list[bytes], list[bytes]]:
    """Split a run of concatenated records into ``(keys, records)``."""
    mv = memoryview(buf)
    end = len(mv) if end is None else end
    keys: list[bytes] = []
    recs: list[bytes] = []
    pos = offset
    unpack = _HEAD.unpack_from
    vunpack = _VLEN.unpack_from
    while pos < end:
        _, _, klen = unpack(mv, pos)
        kstart = pos + 13
        (vlen,) = vunpack(mv, kstart + klen)
        stop = kstart + klen + 4 + vlen
        if stop > end:
            raise ValueError("record overruns its block")
        keys.append(bytes(mv[kstart : kstart + klen]))
        recs.append(bytes(mv[pos:stop]))
        pos = stop
    return keys, recs


def equal_width_boundaries(regions: int, prefix: bytes = b"") -> list[bytes]:
    """Split keys into ``regions`` equal-width partitions.

    The partition variable is the 8 bytes following ``prefix`` read as a
    big-endian integer; the returned list holds the ``regions - 1`` lower
    bounds of partitions ``1..regions-1``.
    """
    if regions < 1:
        raise ValueError("regions must be >= 1")
    return [prefix + (i * (1 << 64) // regions).to_bytes(8, "big") for i in range(1, regions)]
