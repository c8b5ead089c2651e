"""Sorted-string tables: layout, bloom filter, sizing, point reads, level index.

Object layout (all integers little-endian)::

    [entry blocks][block index][bloom][footer]

    block index := u32 n_blocks, then per block:
                   u64 offset, u32 length, u32 key_len, first_key
    bloom       := empty, or u32 n_hashes, u32 n_bits, bit array
    footer      := u64 entry_count, u32 block_count,
                   u64 index_offset, u32 index_len,
                   u64 bloom_offset, u32 bloom_len,
                   u64 smallest_seq, u64 largest_seq,
                   u32 format_version (=1), u32 magic
"""

from __future__ import annotations

import bisect
import hashlib
import math
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from itertools import accumulate
from typing import Iterable, Sequence

import numpy as np

from .core import Entry, KeyRange, decode_record, encode_entry, record_seq, split_records
from .errors import CorruptSst, EmptyInput, UnsortedInput

FORMAT_VERSION = 1
MAGIC = 0x4C534D54  # "LSMT"
FOOTER = struct.Struct("<QIQIQIQQII")
_IDX_HEAD = struct.Struct("<QII")
_U32 = struct.Struct("<I")
INDEX_ENTRY_OVERHEAD = _IDX_HEAD.size  # 16
DEFAULT_BLOCK_SIZE = 4096


class SstKind(IntEnum):
    FIXED = 0
    VSST = 1


class VsstClass(IntEnum):
    NOT_APPLICABLE = 0
    GOOD = 1
    POOR = 2


@dataclass(eq=False)
class SstMeta:
    id: int
    level: int
    min_key: bytes
    max_key: bytes
    size_bytes: int
    entry_count: int
    kind: SstKind = SstKind.FIXED
    vsst_class: VsstClass = VsstClass.NOT_APPLICABLE
    smallest_seq: int = 0
    largest_seq: int = 0
    # overlap ratio vs the next level recorded when a vSST was cut
    cut_overlap: float | None = None

    @property
    def range(self) -> KeyRange:
        return KeyRange(self.min_key, self.max_key)

    def with_level(self, level: int) -> "SstMeta":
        return SstMeta(
            self.id, level, self.min_key, self.max_key, self.size_bytes, self.entry_count,
            self.kind, self.vsst_class, self.smallest_seq, self.largest_seq, self.cut_overlap,
        )

    def __repr__(self) -> str:
        cls = "" if self.vsst_class == VsstClass.NOT_APPLICABLE else f" {self.vsst_class.name}"
        return f"<sst {self.id} L{self.level} [{self.min_key!r}..{self.max_key!r}] {self.size_bytes}B{cls}>"


# -- bloom filter ------------------------------------------------------------


def _key_hashes(keys: Sequence[bytes]) -> tuple[np.ndarray, np.ndarray]:
    h = np.empty(len(keys), dtype=np.uint64)
    for i, k in enumerate(keys):
        h[i] = int.from_bytes(hashlib.blake2b(k, digest_size=8).digest(), "little")
    return h & np.uint64(0xFFFFFFFF), h >> np.uint64(32)


class BloomFilter:
    """Double-hashed bloom filter (blake2b-64 split into two 32-bit halves)."""

    def __init__(self, n_bits: int, n_hashes: int, bits: bytes | bytearray | None = None) -> None:
        self.n_bits = max(8, n_bits)
        self.n_hashes = n_hashes
        nbytes = (self.n_bits + 7) // 8
        self.bits = bytearray(bits) if bits is not None else bytearray(nbytes)
        if len(self.bits) != nbytes:
            raise CorruptSst("bloom bit array length mismatch")

    @staticmethod
    def params(n_keys: int, bits_per_key: int) -> tuple[int, int]:
        n_bits = max(8, n_keys * bits_per_key)
        n_hashes = max(1, min(30, round(bits_per_key * math.log(2))))
        return n_bits, n_hashes

    @classmethod
    def build(cls, keys: Sequence[bytes], bits_per_key: int) -> "BloomFilter":
        n_bits, n_hashes = cls.params(len(keys), bits_per_key)
        bf = cls(n_bits, n_hashes)
        if keys:
            h1, h2 = _key_hashes(keys)
            i = np.arange(n_hashes, dtype=np.uint64)[:, None]
            pos = ((h1[None, :] + i * h2[None, :]) % np.uint64(bf.n_bits)).ravel()
            arr = np.zeros((bf.n_bits + 7) // 8 * 8, dtype=np.uint8)
            arr[pos.astype(np.int64)] = 1
            bf.bits = bytearray(np.packbits(arr, bitorder="little").tobytes())
        return bf

    def may_contain(self, key: bytes) -> bool:
        h = int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")
        h1, h2 = h & 0xFFFFFFFF, h >> 32
        n = self.n_bits
        bits = self.bits
        for i in range(self.n_hashes):
            p = (h1 + i * h2) % n
            if not bits[p >> 3] & (1 << (p & 7)):
                return False
        return True

    def to_bytes(self) -> bytes:
        return _U32.pack(self.n_hashes) + _U32.pack(self.n_bits) + bytes(self.bits)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "BloomFilter":
        n_hashes, n_bits = struct.unpack_from("<II", buf, 0)
        return cls(n_bits, n_hashes, buf[8:])

    @staticmethod
    def encoded_size(n_keys: int, bits_per_key: int) -> int:
        if bits_per_key <= 0:
            return 0
        n_bits, _ = BloomFilter.params(n_keys, bits_per_key)
        return 8 + (n_bits + 7) // 8


# -- sizing ------------------------------------------------------------------


class SstSizer:
    """Exact projected object size while records are appended in order."""

    __slots__ = ("block_size", "bloom_bits", "data", "block", "index", "n")

    def __init__(self, block_size: int = DEFAULT_BLOCK_SIZE, bloom_bits: int = 0) -> None:
        self.block_size = block_size
        self.bloom_bits = bloom_bits
        self.reset()

    def reset(self) -> None:
        self.data = 0
        self.block = 0
        self.index = 4
        self.n = 0

    @property
    def size(self) -> int:
        if self.n == 0:
            return 0
        return self.data + self.index + BloomFilter.encoded_size(self.n, self.bloom_bits) + FOOTER.size

    def size_with(self, rec_len: int, key_len: int) -> int:
        index = self.index
        if self.block == 0 or self.block + rec_len > self.block_size:
            index += INDEX_ENTRY_OVERHEAD + key_len
        bloom = BloomFilter.encoded_size(self.n + 1, self.bloom_bits) if self.bloom_bits else 0
        return self.data + rec_len + index + bloom + FOOTER.size

    def add(self, rec_len: int, key_len: int) -> None:
        if self.block == 0 or self.block + rec_len > self.block_size:
            self.index += INDEX_ENTRY_OVERHEAD + key_len
            self.block = 0
        self.block += rec_len
        self.data += rec_len
        self.n += 1


# -- building ----------------------------------------------------------------


@dataclass
class SstIndex:
    first_keys: list[bytes]
    offsets: list[int]
    lengths: list[int]
    bloom: BloomFilter | None = None


def check_sorted(keys: Sequence[bytes]) -> None:
    for i in range(1, len(keys)):
        if not keys[i - 1] < keys[i]:
            raise UnsortedInput(f"key #{i} {keys[i]!r} does not follow {keys[i - 1]!r}")


def encode_sst(
    keys: Sequence[bytes],
    recs: Sequence[bytes],
    block_size: int = DEFAULT_BLOCK_SIZE,
    bloom_bits: int = 0,
) -> tuple[bytes, SstIndex, int, int]:
    """Serialise one table from parallel key/record lists.

    Returns ``(payload, index, smallest_seq, largest_seq)``.
    """
    if not recs:
        raise EmptyInput("an SST needs at least one entry")
    parts: list[bytes] = []
    first_keys: list[bytes] = []
    offsets: list[int] = []
    lengths: list[int] = []
    pos = 0
    block = 0
    for k, r in zip(keys, recs):
        n = len(r)
        if block == 0 or block + n > block_size:
            if block:
                lengths.append(block)
            first_keys.append(k)
            offsets.append(pos)
            block = 0
        parts.append(r)
        block += n
        pos += n
    lengths.append(block)
    data_len = pos

    idx_parts = [_U32.pack(len(first_keys))]
    for k, off, ln in zip(first_keys, offsets, lengths):
        idx_parts.append(_IDX_HEAD.pack(off, ln, len(k)))
        idx_parts.append(k)
    index_bytes = b"".join(idx_parts)

    bloom = BloomFilter.build(keys, bloom_bits) if bloom_bits > 0 else None
    bloom_bytes = bloom.to_bytes() if bloom is not None else b""

    seqs = [record_seq(r) for r in recs]
    smallest, largest = min(seqs), max(seqs)
    footer = FOOTER.pack(
        len(recs), len(first_keys), data_len, len(index_bytes), data_len + len(index_bytes),
        len(bloom_bytes), smallest, largest, FORMAT_VERSION, MAGIC,
    )
    payload = b"".join(parts) + index_bytes + bloom_bytes + footer
    return payload, SstIndex(first_keys, offsets, lengths, bloom), smallest, largest


def encode_entries(entries: Iterable[Entry], block_size: int = DEFAULT_BLOCK_SIZE, bloom_bits: int = 0) -> bytes:
    """Encode an ordered entry stream into SST bytes (one entry per key)."""
    entries = list(entries)
    keys = [e.key for e in entries]
    check_sorted(keys)
    return encode_sst(keys, [encode_entry(e) for e in entries], block_size, bloom_bits)[0]


def parse_footer(payload: bytes) -> tuple[int, ...]:
    if len(payload) < FOOTER.size:
        raise CorruptSst("object shorter than footer")
    fields = FOOTER.unpack_from(payload, len(payload) - FOOTER.size)
    if fields[-1] != MAGIC or fields[-2] != FORMAT_VERSION:
        raise CorruptSst("bad magic or format version")
    return fields


def parse_index(buf: bytes) -> SstIndex:
    (n,) = _U32.unpack_from(buf, 0)
    pos = 4
    first_keys, offsets, lengths = [], [], []
    for _ in range(n):
        off, ln, klen = _IDX_HEAD.unpack_from(buf, pos)
        pos += _IDX_HEAD.size
        first_keys.append(bytes(buf[pos : pos + klen]))
        pos += klen
        offsets.append(off)
        lengths.append(ln)
    return SstIndex(first_keys, offsets, lengths)


def decode_sst(payload: bytes) -> tuple[list[bytes], list[bytes], SstIndex]:
    """Inverse of :func:`encode_sst` for a whole in-memory object."""
    (count, nblocks, idx_off, idx_len, bloom_off, bloom_len, *_rest) = parse_footer(payload)
    index = parse_index(payload[idx_off : idx_off + idx_len])
    if len(index.first_keys) != nblocks:
        raise CorruptSst("block count mismatch")
    if bloom_len:
        index.bloom = BloomFilter.from_bytes(payload[bloom_off : bloom_off + bloom_len])
    keys, recs = split_records(payload, 0, idx_off)
    if len(recs) != count:
        raise CorruptSst("entry count mismatch")
    return keys, recs, index


def decode_entries(payload: bytes) -> list[Entry]:
    _, recs, _ = decode_sst(payload)
    return [decode_record(r) for r in recs]


# -- in-memory table handle --------------------------------------------------


@dataclass
class Table:
    """Metadata plus the pinned index/bloom of one persisted SST.

    ``keys``/``recs`` are a decoded copy kept by the table cache so that
    compactions do not re-parse objects; every read is still charged to the
    device.
    """

    meta: SstMeta
    index: SstIndex
    keys: list[bytes] | None = None
    recs: list[bytes] | None = None

    def block_for(self, key: bytes) -> int | None:
        i = bisect.bisect_right(self.index.first_keys, key) - 1
        return i if i >= 0 else None


def find_in_block(block: bytes, key: bytes, read_seq: int | None = None) -> Entry | None:
    keys, recs = split_records(block)
    i = bisect.bisect_left(keys, key)
    if i < len(keys) and keys[i] == key:
        e = decode_record(recs[i])
        if read_seq is None or e.seq <= read_seq:
            return e
    return None


# -- level index -------------------------------------------------------------


class SortedRun:
    """Immutable, key-sorted, non-overlapping list of SSTs for one level."""

    __slots__ = ("ssts", "mins", "maxs", "_prefix", "total")

    def __init__(self, ssts: Iterable[SstMeta] = ()) -> None:
        self.ssts: list[SstMeta] = sorted(ssts, key=lambda m: m.min_key)
        self.mins = [m.min_key for m in self.ssts]
        self.maxs = [m.max_key for m in self.ssts]
        self._prefix = [0, *accumulate(m.size_bytes for m in self.ssts)]
        self.total = self._prefix[-1]

    def __len__(self) -> int:
        return len(self.ssts)

    def __iter__(self):
        return iter(self.ssts)

    def span(self, lo: bytes, hi: bytes) -> tuple[int, int]:
        """Index slice ``[a, b)`` of SSTs intersecting ``[lo, hi]``."""
        return bisect.bisect_left(self.maxs, lo), bisect.bisect_right(self.mins, hi)

    def overlapping(self, lo: bytes, hi: bytes) -> list[SstMeta]:
        a, b = self.span(lo, hi)
        return self.ssts[a:b]

    def overlap_bytes(self, lo: bytes, hi: bytes) -> int:
        a, b = self.span(lo, hi)
        return self._prefix[b] - self._prefix[a] if b > a else 0

    def find(self, key: bytes) -> SstMeta | None:
        i = bisect.bisect_left(self.maxs, key)
        if i < len(self.ssts) and self.mins[i] <= key:
            return self.ssts[i]
        return None

    def replace(self, remove: Iterable[int], add: Iterable[SstMeta]) -> "SortedRun":
        gone = set(remove)
        return SortedRun([m for m in self.ssts if m.id not in gone] + list(add))

    def is_valid(self) -> bool:
        return all(self.maxs[i] < self.mins[i + 1] for i in range(len(self.ssts) - 1))


def overlap_bytes(rng: KeyRange, level: SortedRun | Sequence[SstMeta]) -> int:
    """Total size of the SSTs in ``level`` whose range intersects ``rng``."""
    if not isinstance(level, SortedRun):
        level = SortedRun(level)
    return level.overlap_bytes(rng.min, rng.max)


@dataclass
class BuiltSst:
    meta: SstMeta
    payload: bytes
    table: Table = field(repr=False)


def build_sst(
    oid: int,
    keys: list[bytes],
    recs: list[bytes],
    level: int,
    kind: SstKind = SstKind.FIXED,
    block_size: int = DEFAULT_BLOCK_SIZE,
    bloom_bits: int = 0,
    vsst_class: VsstClass = VsstClass.NOT_APPLICABLE,
    cut_overlap: float | None = None,
) -> BuiltSst:
    payload, index, smallest, largest = encode_sst(keys, recs, block_size, bloom_bits)
    meta = SstMeta(
        oid, level, keys[0], keys[-1], len(payload), len(recs), kind, vsst_class,
        smallest, largest, cut_overlap,
    )
    return BuiltSst(meta, payload, Table(meta, index, keys, recs))


def write_sst(
    device,
    entries: Iterable[Entry],
    level: int,
    kind: SstKind = SstKind.FIXED,
    block_size: int = DEFAULT_BLOCK_SIZE,
    bloom_bits: int = 0,
) -> tuple[SstMeta, Table]:
    """Build an SST from an ordered entry stream and persist it on ``device``."""
    entries = list(entries)
    if not entries:
        raise EmptyInput("an SST needs at least one entry")
    keys = [e.key for e in entries]
    check_sorted(keys)
    built = build_sst(device.reserve_id(), keys, [encode_entry(e) for e in entries], level, kind, block_size, bloom_bits)
    device.write_object(built.payload, oid=built.meta.id)
    return built.meta, built.table


def open_table(device, meta: SstMeta, *, wait: bool = True) -> Table:
    """Load footer, index and bloom of a persisted SST (charged as one read)."""
    size = meta.size_bytes
    tail = device.read_object(meta.id, 0, size, wait=wait)
    keys, recs, index = decode_sst(tail)
    return Table(meta, index, keys, recs)


def sst_get(device, table: Table, key: bytes, read_seq: int | None = None, *, wait: bool = True) -> Entry | None:
    """Point lookup inside one table; reads at most one block."""
    meta = table.meta
    if key < meta.min_key or key > meta.max_key:
        return None
    bloom = table.index.bloom
    if bloom is not None and not bloom.may_contain(key):
        return None
    b = table.block_for(key)
    if b is None:
        return None
    block = device.read_object(meta.id, table.index.offsets[b], table.index.lengths[b], wait=wait)
    return find_in_block(block, key, read_seq)
