"""The LSM engine: memtables, L0, leveled structure, stall gating, manifest.

All activity runs as cooperative processes on a :class:`~lsmkv.sim.Simulator`
sharing the device's clock.  The synchronous methods (:meth:`Engine.put`,
:meth:`Engine.get`, ...) drive the simulator until the request finishes, so
background flushes and compactions progress while callers wait.  The
open-loop harness instead spawns :meth:`Engine.execute` generators directly.
"""

from __future__ import annotations

import bisect
import math
import os
import random
import struct
import zlib
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterator

from .compaction import (
    ChainTrace,
    CompactionJob,
    JobKind,
    LevelManifest,
    Stage,
    Trigger,
    classify_vsst,
    cut_vssts,
    make_job,
    merge_runs,
    pick_level,
    select_sources,
    split_fixed,
)
from .config import EngineConfig, Policy
from .core import RECORD_OVERHEAD, Op, encode_record, equal_width_boundaries, record_is_delete, record_value, validate_key
from .device import Device, DeviceModel, DeviceMode, FileStorage, MemoryStorage
from .errors import CorruptManifest, Deadlock, EngineClosed, InvariantViolation
from .sim import Mutex, Signal, Simulator
from .sst import SortedRun, SstKind, SstMeta, SstSizer, Table, VsstClass, build_sst, decode_sst, sst_get

MANIFEST_FORMAT = 1
MANIFEST_NAME = "MANIFEST"
OBJECTS_DIR = "objects"


# -- stalls ------------------------------------------------------------------


class StallCause(str, Enum):
    MEMTABLES_FULL = "MemtablesFull"
    L0_FULL = "L0Full"


@dataclass(frozen=True)
class StallInterval:
    start_ns: int
    end_ns: int
    cause: StallCause
    region: int = 0

    @property
    def duration_ns(self) -> int:
        return self.end_ns - self.start_ns


class StallLog:
    """Intervals during which a writer was blocked by memtable gating."""

    def __init__(self) -> None:
        self.intervals: list[StallInterval] = []
        self._open: dict[int, tuple[int, StallCause]] = {}

    def begin(self, region: int, t_ns: int, cause: StallCause) -> None:
        self._open.setdefault(region, (t_ns, cause))

    def end(self, region: int, t_ns: int) -> None:
        start = self._open.pop(region, None)
        if start is not None and t_ns > start[0]:
            self.intervals.append(StallInterval(start[0], t_ns, start[1], region))

    def is_open(self, region: int = 0) -> bool:
        return region in self._open

    def merged(self) -> list[tuple[int, int]]:
        """Union of all intervals (regions may stall concurrently)."""
        out: list[list[int]] = []
        for iv in sorted(self.intervals, key=lambda i: i.start_ns):
            if out and iv.start_ns <= out[-1][1]:
                out[-1][1] = max(out[-1][1], iv.end_ns)
            else:
                out.append([iv.start_ns, iv.end_ns])
        return [(a, b) for a, b in out]

    def between(self, start_ns: int, end_ns: int) -> list[tuple[int, int]]:
        return [(max(a, start_ns), min(b, end_ns)) for a, b in self.merged() if b > start_ns and a < end_ns]

    @property
    def total_ns(self) -> int:
        return sum(b - a for a, b in self.merged())

    @property
    def max_ns(self) -> int:
        return max((b - a for a, b in self.merged()), default=0)

    def __len__(self) -> int:
        return len(self.merged())


# -- memtable ----------------------------------------------------------------


class Memtable:
    """Hash map of key -> newest record; sorted once at flush time."""

    __slots__ = ("data", "bytes")

    def __init__(self) -> None:
        self.data: dict[bytes, bytes] = {}
        self.bytes = 0

    def put(self, key: bytes, rec: bytes) -> None:
        old = self.data.get(key)
        if old is not None:
            self.bytes -= len(old)
        self.data[key] = rec
        self.bytes += len(rec)

    def __len__(self) -> int:
        return len(self.data)

    def sorted_run(self) -> tuple[list[bytes], list[bytes]]:
        keys = sorted(self.data)
        data = self.data
        return keys, [data[k] for k in keys]


# -- statistics ----------------------------------------------------------------


@dataclass
class EngineStats:
    puts: int = 0
    deletes: int = 0
    gets: int = 0
    user_bytes: int = 0
    flushes: int = 0
    flush_bytes: int = 0
    compactions: int = 0
    vsst_violations: int = 0  # jobs that fell back to a Poor vSST
    good_victim_jobs: int = 0
    vssts_created: int = 0
    poor_vssts_created: int = 0
    tail_vssts_created: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class StageRecord:
    """One executed job, kept for amplification studies."""

    region: int
    source_level: int
    target_level: int
    kind: str
    source_bytes: int
    target_bytes: int
    bytes_read: int
    bytes_written: int
    start_ns: int
    end_ns: int
    fallback: bool = False


@dataclass
class _Chain:
    trace: ChainTrace
    inflight: int = 0


class Region:
    """One independent LSM tree over a key-range partition."""

    def __init__(self, engine: "Engine", index: int) -> None:
        cfg = engine.config
        self.index = index
        self.manifest = LevelManifest(cfg.level_targets())
        n = self.manifest.num_levels
        self.active = Memtable()
        self.immutables: deque[Memtable] = deque()
        self.writer = Mutex()
        self.changed = Signal()
        self.memtable_freed = Signal()
        self.flushing = False
        self.busy: set[int] = set()
        self.incoming = [0] * n
        self.outgoing = [0] * n
        self.l0_job = False
        self.chains: dict[int, _Chain] = {}


# -- manifest encoding ---------------------------------------------------------

_MF_HEAD = struct.Struct("<IIIQ")  # format, regions, levels, last_seq
_MF_SST = struct.Struct("<QBBQQQQdB")  # id, kind, class, size, entries, smallest, largest, cut_overlap, tail


def encode_manifest(manifests: list[LevelManifest], last_seq: int, tails: set[int] | None = None) -> bytes:
    tails = tails or set()
    n_levels = manifests[0].num_levels if manifests else 0
    parts = [_MF_HEAD.pack(MANIFEST_FORMAT, len(manifests), n_levels, last_seq)]
    for m in manifests:
        for k in range(n_levels):
            ssts = m.ssts(k)
            parts.append(struct.pack("<I", len(ssts)))
            for s in ssts:
                co = s.cut_overlap if s.cut_overlap is not None else math.nan
                parts.append(
                    _MF_SST.pack(s.id, s.kind, s.vsst_class, s.size_bytes, s.entry_count,
                                 s.smallest_seq, s.largest_seq, co, 1 if s.id in tails else 0)
                )
                parts.append(struct.pack("<I", len(s.min_key)) + s.min_key)
                parts.append(struct.pack("<I", len(s.max_key)) + s.max_key)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_manifest(buf: bytes, targets: list[float]) -> tuple[list[LevelManifest], int, set[int]]:
    """Inverse of :func:`encode_manifest`.

    Raises:
        CorruptManifest: truncated data, checksum mismatch or unknown format.
    """
    if len(buf) < _MF_HEAD.size + 4:
        raise CorruptManifest("manifest truncated")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptManifest("manifest checksum mismatch")
    fmt, n_regions, n_levels, last_seq = _MF_HEAD.unpack_from(body, 0)
    if fmt != MANIFEST_FORMAT:
        raise CorruptManifest(f"unknown manifest format {fmt}")
    if n_levels != len(targets):
        raise CorruptManifest(f"manifest has {n_levels} levels, config expects {len(targets)}")
    pos = _MF_HEAD.size
    out, tails = [], set()
    try:
        for _ in range(n_regions):
            per_level: list[list[SstMeta]] = []
            for k in range(n_levels):
                (count,) = struct.unpack_from("<I", body, pos)
                pos += 4
                ssts = []
                for _ in range(count):
                    sid, kind, cls, size, entries, sseq, lseq, co, tail = _MF_SST.unpack_from(body, pos)
                    pos += _MF_SST.size
                    (klen,) = struct.unpack_from("<I", body, pos)
                    lo = bytes(body[pos + 4 : pos + 4 + klen])
                    pos += 4 + klen
                    (klen,) = struct.unpack_from("<I", body, pos)
                    hi = bytes(body[pos + 4 : pos + 4 + klen])
                    pos += 4 + klen
                    ssts.append(SstMeta(sid, k, lo, hi, size, entries, SstKind(kind), VsstClass(cls), sseq, lseq,
                                        None if math.isnan(co) else co))
                    if tail:
                        tails.add(sid)
                per_level.append(ssts)
            out.append(LevelManifest(targets, per_level[0], [SortedRun()] + [SortedRun(s) for s in per_level[1:]]))
    except struct.error as exc:
        raise CorruptManifest(f"manifest truncated: {exc}") from exc
    if pos != len(body):
        raise CorruptManifest("trailing bytes in manifest")
    return out, last_seq, tails


# -- engine --------------------------------------------------------------------


class Engine:
    """An LSM key-value store of ``config.regions`` independent regions.

    Args:
        config: engine parameters.
        device: storage device; a simulated in-memory device by default.
        path: directory holding the manifest checkpoint (and, when no device
            is given, the object files).  None keeps the manifest in memory.
    """

    def __init__(
        self,
        config: EngineConfig | None = None,
        device: Device | None = None,
        *,
        path: str | os.PathLike | None = None,
    ) -> None:
        self.config = cfg = config or EngineConfig()
        self.path = Path(path) if path is not None else None
        if device is None:
            storage = FileStorage(self.path / OBJECTS_DIR) if self.path is not None else MemoryStorage()
            mode = DeviceMode.SIMULATED if cfg.deterministic else DeviceMode.FILE
            device = Device(DeviceModel(mode=mode), storage)
        self.device = device
        self.sim = Simulator(device.clock)
        self.tables: dict[int, Table] = {}
        self.boundaries = equal_width_boundaries(cfg.regions, cfg.region_key_prefix)
        self.regions = [Region(self, i) for i in range(cfg.regions)]
        self.seq = 0
        self.running = 0
        self.stalls = StallLog()
        self.chains: list[ChainTrace] = []
        self.stages: list[StageRecord] = []
        self.stats = EngineStats()
        self.rng = random.Random(cfg.seed)
        self.closed = False
        self.frozen_until = 0
        self.manifest_bytes: bytes | None = None
        self.vsst_snapshots: dict[int, tuple[SortedRun, bool, int]] = {}  # id -> (L2 at cut, tail, max record)
        self._sizer = SstSizer(cfg.block_size, cfg.bloom_bits_per_key)
        # on a wall clock real CPU time is the cost; no synthetic charge
        self._put_cpu = cfg.put_cpu_ns if device.simulated else 0
        self._get_cpu = cfg.get_cpu_ns if device.simulated else 0
        self._scheduling = False
        if self.path is not None:
            self.path.mkdir(parents=True, exist_ok=True)
            if (self.path / MANIFEST_NAME).exists():
                self.recover()

    # -- helpers -------------------------------------------------------------

    @property
    def now(self) -> int:
        return self.sim.now

    def region_for(self, key: bytes) -> Region:
        return self.regions[bisect.bisect_right(self.boundaries, key)]

    def _check_open(self) -> None:
        if self.closed:
            raise EngineClosed("engine is closed")

    def _cap(self, region: Region, level: int) -> float:
        return region.manifest.targets[level] + self.config.debt_bytes

    def _add_table(self, table: Table) -> None:
        if not self.config.table_cache:
            table = Table(table.meta, table.index)
        self.tables[table.meta.id] = table

    def _load_table(self, meta: SstMeta) -> Table:
        tbl = self.tables.get(meta.id)
        if tbl is None:
            keys, recs, index = decode_sst(self.device.storage.get(meta.id))
            tbl = Table(meta, index, keys, recs)
            self._add_table(tbl)
        return tbl

    # -- foreground processes ------------------------------------------------

    def _wait_unfrozen(self) -> Iterator[Any]:
        while self.frozen_until > self.sim.now:
            yield self.frozen_until

    def write_proc(self, key: bytes, value: bytes, op: Op = Op.PUT) -> Iterator[Any]:
        """Process inserting one mutation; blocks (and logs a stall) when gated."""
        self._check_open()
        key = validate_key(key)
        if op == Op.DELETE:
            value = b""
        if self.frozen_until > self.sim.now:
            yield from self._wait_unfrozen()
        region = self.region_for(key)
        yield from region.writer.acquire()
        try:
            rec_len = RECORD_OVERHEAD + len(key) + len(value)
            if region.active.bytes and region.active.bytes + rec_len > self.config.memtable_bytes:
                yield from self._rotate(region)
            self.seq += 1
            region.active.put(key, encode_record(key, self.seq, op, value))
            self.stats.user_bytes += len(key) + len(value)
            if op == Op.DELETE:
                self.stats.deletes += 1
            else:
                self.stats.puts += 1
            yield self.sim.now + self._put_cpu
        finally:
            region.writer.release()

    def _rotate(self, region: Region) -> Iterator[Any]:
        limit = self.config.num_memtables - 1
        if len(region.immutables) >= limit:
            cause = StallCause.L0_FULL if len(region.manifest.l0) >= self.config.l0_max_ssts else StallCause.MEMTABLES_FULL
            self.stalls.begin(region.index, self.sim.now, cause)
            while len(region.immutables) >= limit:
                yield region.memtable_freed
            self.stalls.end(region.index, self.sim.now)
        region.immutables.append(region.active)
        region.active = Memtable()
        if not region.flushing:
            region.flushing = True
            self.sim.spawn(self._flush_proc(region), f"flush-{region.index}")

    def get_proc(self, key: bytes) -> Iterator[Any]:
        """Process returning the newest visible value for ``key`` (or None)."""
        self._check_open()
        key = validate_key(key)
        if self.frozen_until > self.sim.now:
            yield from self._wait_unfrozen()
        self.stats.gets += 1
        yield self.sim.now + self._get_cpu
        region = self.region_for(key)
        rec = region.active.data.get(key)
        if rec is None:
            for mem in reversed(region.immutables):
                rec = mem.data.get(key)
                if rec is not None:
                    break
        if rec is not None:
            return None if record_is_delete(rec) else record_value(rec)
        dev = self.device
        for meta in reversed(region.manifest.l0):
            if not meta.min_key <= key <= meta.max_key:
                continue
            tbl = self.tables.get(meta.id)
            if tbl is None:  # compacted away meanwhile; its data is now deeper
                continue
            ops = dev.stats.read_ops
            e = sst_get(dev, tbl, key, wait=False)
            if dev.stats.read_ops != ops:
                yield dev.last_done
            if e is not None:
                return None if e.is_delete else e.value
        for k in range(1, region.manifest.num_levels):
            meta = region.manifest.levels[k].find(key)
            if meta is None:
                continue
            tbl = self.tables.get(meta.id)
            if tbl is None:
                continue
            ops = dev.stats.read_ops
            e = sst_get(dev, tbl, key, wait=False)
            if dev.stats.read_ops != ops:
                yield dev.last_done
            if e is not None:
                return None if e.is_delete else e.value
        return None

    def execute(self, request) -> Iterator[Any]:
        """Serve one workload request (anything with ``op``, ``key``, ``value``)."""
        op = getattr(request.op, "value", request.op)
        if op == "read":
            return (yield from self.get_proc(request.key))
        return (yield from self.write_proc(request.key, request.value, Op.PUT))

    # -- synchronous API -------------------------------------------------------

    def _drive(self, gen: Iterator[Any]) -> Any:
        return self.sim.drive(gen)

    def put(self, key: bytes, value: bytes) -> None:
        self._check_open()
        self._drive(self.write_proc(key, value, Op.PUT))

    def delete(self, key: bytes) -> None:
        self._check_open()
        self._drive(self.write_proc(key, b"", Op.DELETE))

    def get(self, key: bytes) -> bytes | None:
        self._check_open()
        return self._drive(self.get_proc(key))

    def freeze(self, duration_ns: int, at_ns: int | None = None) -> None:
        """Stop admitting foreground requests for ``duration_ns`` starting at ``at_ns`` (default: now)."""
        start = self.sim.now if at_ns is None else at_ns

        def proc():
            yield start
            self.frozen_until = max(self.frozen_until, start + duration_ns)

        if start <= self.sim.now:
            self.frozen_until = max(self.frozen_until, start + duration_ns)
        else:
            self.sim.spawn(proc(), "freeze")

    # -- flush -----------------------------------------------------------------

    def _flush_proc(self, region: Region) -> Iterator[Any]:
        cfg = self.config
        dev = self.device
        while region.immutables:
            while len(region.manifest.l0) >= cfg.l0_max_ssts:
                self._schedule()
                yield region.changed
            mem = region.immutables[0]
            keys, recs = mem.sorted_run()
            oid = dev.reserve_id()
            built = build_sst(oid, keys, recs, 0, SstKind.FIXED, cfg.block_size, cfg.bloom_bits_per_key)
            dev.write_object(built.payload, wait=False, oid=oid)
            yield dev.last_done
            self._add_table(built.table)
            m = region.manifest
            region.manifest = LevelManifest(m.targets, m.l0 + [built.meta], m.levels)
            region.immutables.popleft()
            self.stats.flushes += 1
            self.stats.flush_bytes += built.meta.size_bytes
            region.memtable_freed.fire()
            self._after_change(region)
        region.flushing = False

    def _after_change(self, region: Region) -> None:
        if self.config.verify_invariants:
            problems = region.manifest.check_leveled()
            if problems:
                raise InvariantViolation("; ".join(problems))
        if self.config.manifest_checkpoints:
            self.checkpoint_manifest()
        region.changed.fire()
        self._schedule()

    # -- scheduling ------------------------------------------------------------

    def _schedule(self) -> None:
        if not self.config.auto_compact or self._scheduling:
            return
        self._scheduling = True
        try:
            progress = True
            while progress and self.running < self.config.background_workers:
                progress = False
                for region in self.regions:
                    if self.running >= self.config.background_workers:
                        break
                    planned = self._plan(region)
                    if planned is not None:
                        self._start(region, *planned)
                        progress = True
        finally:
            self._scheduling = False

    def _candidates(self, region: Region) -> list[tuple[int, Trigger]]:
        cfg = self.config
        m = region.manifest
        out: list[tuple[int, Trigger]] = []
        if len(m.l0) >= cfg.l0_max_ssts:
            out.append((0, Trigger.MEMTABLE_FLUSH_BLOCKED))
        over = []
        for k in range(1, m.last_level):
            eff = m.actual(k) - region.outgoing[k]
            t = m.targets[k]
            if eff > t:
                over.append((-(eff / t), k))
        out.extend((k, Trigger.LEVEL_OVER_TARGET) for _, k in sorted(over))
        if m.l0 and not cfg.policy.tiered and len(m.l0) < cfg.l0_max_ssts:
            out.append((0, Trigger.L0_COMPACTION))
        return out

    def _plan(self, region: Region) -> tuple[CompactionJob, _Chain] | None:
        for level, trigger in self._candidates(region):
            need = 0
            if level:
                need = region.manifest.actual(level) - region.outgoing[level] - int(region.manifest.targets[level])
            job = self._resolve(region, level, need)
            if job is None:
                continue
            chain = region.chains.get(level)
            if chain is None:
                chain = _Chain(ChainTrace(trigger, level, region.index, self.sim.now))
                region.chains[level] = chain
            return job, chain
        return None

    def _has_room(self, region: Region, level: int, incoming: int) -> bool:
        m = region.manifest
        if level == m.last_level:
            return True
        eff = m.actual(level) + region.incoming[level] - region.outgoing[level]
        return eff <= 0 or eff + incoming <= self._cap(region, level)

    def _resolve(self, region: Region, level: int, need: int) -> CompactionJob | None:
        """A runnable job at ``level`` or, if its target lacks room, deeper down."""
        m = region.manifest
        if level == 0 and region.l0_job:
            return None
        sources, fallback = select_sources(m, level, self.config, needed=max(0, need), busy=region.busy, rng=self.rng)
        if not sources:
            return None
        src_bytes = sum(s.size_bytes for s in sources)
        tgt = level + 1
        if self._has_room(region, tgt, src_bytes):
            job = make_job(m, level, sources, self.config.policy, fallback)
            if any(t.id in region.busy for t in job.target_ssts):
                return None
            return job
        deficit = m.actual(tgt) + region.incoming[tgt] - region.outgoing[tgt] + src_bytes - int(self._cap(region, tgt))
        if deficit <= 0:
            return None
        return self._resolve(region, tgt, deficit)

    def _start(self, region: Region, job: CompactionJob, chain: _Chain) -> None:
        region.busy.update(job.ids)
        region.incoming[job.target_level] += job.source_bytes
        region.outgoing[job.source_level] += job.source_bytes
        if job.source_level == 0:
            region.l0_job = True
        if job.fallback:
            self.stats.vsst_violations += 1
        elif self.config.policy == Policy.VLSM and job.source_level == 1:
            self.stats.good_victim_jobs += 1
        chain.inflight += 1
        self.running += 1
        self.sim.spawn(self._job_proc(region, job, chain), "compaction")

    # -- compaction job --------------------------------------------------------

    def _job_proc(self, region: Region, job: CompactionJob, chain: _Chain) -> Iterator[Any]:
        cfg = self.config
        dev = self.device
        t0 = self.sim.now
        bytes_read = 0
        runs: dict[int, tuple[list[bytes], list[bytes]]] = {}
        for meta in job.target_ssts + job.source_ssts:
            payload = dev.read_object(meta.id, 0, meta.size_bytes, wait=False)
            bytes_read += meta.size_bytes
            yield dev.last_done
            tbl = self.tables.get(meta.id)
            if tbl is not None and tbl.keys is not None:
                runs[meta.id] = (tbl.keys, tbl.recs)
            else:
                keys, recs, _ = decode_sst(payload)
                runs[meta.id] = (keys, recs)

        tgt = job.target_level
        last = tgt == region.manifest.last_level
        vlsm_cut = cfg.policy == Policy.VLSM and tgt == 1
        l2 = region.manifest.levels[2] if vlsm_cut and region.manifest.num_levels > 2 else SortedRun()
        kind = SstKind.VSST if vlsm_cut else SstKind.FIXED
        outputs: list[SstMeta] = []
        bytes_written = 0
        for srcs, tgts in job.groups:
            sources = [runs[t.id] for t in tgts] + [runs[s.id] for s in srcs]
            keys, recs = merge_runs(sources, drop_tombstones=last)
            if not keys:
                continue
            if vlsm_cut:
                pieces = [
                    (c.start, c.end, c.vsst_class, c.overlap_ratio, c.tail)
                    for c in cut_vssts(keys, recs, l2, cfg.s_min, cfg.s_max, cfg.growth_factor, self._sizer)
                ]
            else:
                pieces = [(a, b, VsstClass.NOT_APPLICABLE, None, False) for a, b in split_fixed(keys, recs, cfg.s_max, self._sizer)]
            for a, b, cls, ratio, tail in pieces:
                oid = dev.reserve_id()
                built = build_sst(oid, keys[a:b], recs[a:b], tgt, kind, cfg.block_size, cfg.bloom_bits_per_key, cls, ratio)
                dev.write_object(built.payload, wait=False, oid=oid)
                bytes_written += built.meta.size_bytes
                yield dev.last_done
                self._add_table(built.table)
                outputs.append(built.meta)
                if vlsm_cut:
                    self.stats.vssts_created += 1
                    self.stats.poor_vssts_created += cls == VsstClass.POOR
                    self.stats.tail_vssts_created += tail
                    self.vsst_snapshots[oid] = (l2, tail, max(len(r) for r in recs[a:b]))

        self._commit(region, job, outputs)
        self.stats.compactions += 1
        stage = Stage(job.source_level, bytes_read, bytes_written, job.kind.value, t0, self.sim.now)
        self.stages.append(
            StageRecord(region.index, job.source_level, tgt, job.kind.value, job.source_bytes, job.target_bytes,
                        bytes_read, bytes_written, t0, self.sim.now, job.fallback)
        )
        chain.trace.stages.append(stage)
        chain.inflight -= 1
        root = chain.trace.root_level
        if job.source_level == root and chain.inflight == 0 and region.chains.get(root) is chain:
            chain.trace.closed_ns = self.sim.now
            self.chains.append(chain.trace)
            del region.chains[root]
        self.running -= 1
        self._after_change(region)

    def _commit(self, region: Region, job: CompactionJob, outputs: list[SstMeta]) -> None:
        m = region.manifest
        src_ids = {s.id for s in job.source_ssts}
        tgt_ids = {t.id for t in job.target_ssts}
        levels = list(m.levels)
        l0 = m.l0
        if job.source_level == 0:
            l0 = [s for s in l0 if s.id not in src_ids]
        else:
            levels[job.source_level] = levels[job.source_level].replace(src_ids, [])
        levels[job.target_level] = levels[job.target_level].replace(tgt_ids, outputs)
        region.manifest = LevelManifest(m.targets, l0, levels)
        for sid in src_ids | tgt_ids:
            self.device.delete_object(sid)
            self.tables.pop(sid, None)
            self.vsst_snapshots.pop(sid, None)
        region.busy.difference_update(src_ids | tgt_ids)
        region.incoming[job.target_level] -= job.source_bytes
        region.outgoing[job.source_level] -= job.source_bytes
        if job.source_level == 0:
            region.l0_job = False

    # -- manual chains -----------------------------------------------------------

    def trace_chain(self, region: int = 0, level: int | None = None) -> ChainTrace | None:
        """Run the dependent jobs freeing ``level`` (default: highest priority) to completion.

        Works with ``auto_compact`` disabled: jobs are executed one at a time,
        deepest first, until a job sourced at the root level commits.
        """
        reg = self.regions[region]
        m = reg.manifest
        root = pick_level(m, self.config) if level is None else level
        if root is None:
            return None
        if root == 0:
            trigger = Trigger.MEMTABLE_FLUSH_BLOCKED if len(m.l0) >= self.config.l0_max_ssts else Trigger.L0_COMPACTION
        else:
            trigger = Trigger.LEVEL_OVER_TARGET
        chain = _Chain(ChainTrace(trigger, root, region, self.sim.now))
        reg.chains[root] = chain
        while True:
            need = 0
            if root:
                need = reg.manifest.actual(root) - int(reg.manifest.targets[root])
            job = self._resolve(reg, root, need)
            if job is None:
                if self.running:
                    self.sim.run_until(lambda: self.running == 0)
                    continue
                reg.chains.pop(root, None)
                break
            self._start(reg, job, chain)
            self.sim.run_until(lambda: self.running == 0)
            if job.source_level == root:
                break
        return chain.trace if chain.trace.stages else None

    def run_tiering_compaction(self, region: int = 0) -> ChainTrace | None:
        """Free L1 bottom-up, then merge all of L0 into it (tiered policies)."""
        if not self.config.policy.tiered:
            raise ValueError("tiering compaction needs a tiered policy")
        return self.trace_chain(region, 0)

    # -- lifecycle ---------------------------------------------------------------

    def flush_memtable(self, region: int = 0) -> SstMeta | None:
        """Seal the active memtable and wait until it lands in L0."""
        reg = self.regions[region]

        def proc():
            yield from reg.writer.acquire()
            try:
                if reg.active.data:
                    yield from self._rotate(reg)
            finally:
                reg.writer.release()

        self._drive(proc())
        self.sim.run_until(lambda: not reg.immutables)
        return reg.manifest.l0[-1] if reg.manifest.l0 else None

    def idle(self) -> bool:
        return self.running == 0 and not any(r.flushing or r.immutables for r in self.regions)

    def wait_idle(self, limit_ns: int | None = None) -> bool:
        """Run background work until nothing is pending."""
        self._schedule()
        try:
            return self.sim.run_until(self.idle, limit_ns)
        except Deadlock:
            if self.idle():
                return True
            raise

    def flush_all(self) -> None:
        for i, reg in enumerate(self.regions):
            if reg.active.data:
                self.flush_memtable(i)
        self.wait_idle()

    def close(self) -> None:
        if self.closed:
            return
        self.flush_all()
        self.checkpoint_manifest()
        self.closed = True

    def __enter__(self) -> "Engine":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- manifest ------------------------------------------------------------------

    def manifest_snapshot(self) -> list[list[list[int]]]:
        return [r.manifest.ids() for r in self.regions]

    def checkpoint_manifest(self) -> bytes:
        tails = {i for i, snap in self.vsst_snapshots.items() if snap[1]}
        data = encode_manifest([r.manifest for r in self.regions], self.seq, tails)
        self.manifest_bytes = data
        if self.path is not None:
            tmp = self.path / (MANIFEST_NAME + ".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, self.path / MANIFEST_NAME)
        return data

    def recover(self, data: bytes | None = None) -> list[LevelManifest]:
        """Rebuild the level structure from the newest checkpoint.

        Entries that were only in memtables are not recovered.  Objects not
        referenced by the manifest (outputs of interrupted jobs) are deleted.

        Raises:
            CorruptManifest: missing, truncated or checksum-failing checkpoint.
        """
        if data is None:
            if self.path is not None and (self.path / MANIFEST_NAME).exists():
                data = (self.path / MANIFEST_NAME).read_bytes()
            elif self.manifest_bytes is not None:
                data = self.manifest_bytes
            else:
                raise CorruptManifest("no manifest checkpoint available")
        manifests, last_seq, tails = decode_manifest(data, self.config.level_targets())
        if len(manifests) != len(self.regions):
            raise CorruptManifest(f"manifest has {len(manifests)} regions, config expects {len(self.regions)}")
        live: set[int] = set()
        self.tables.clear()
        for reg, m in zip(self.regions, manifests):
            reg.manifest = m
            reg.active = Memtable()
            reg.immutables.clear()
            for meta in m.all_ssts():
                live.add(meta.id)
                self._load_table(meta)
        for oid in self.device.live_objects():
            if oid not in live:
                self.device.delete_object(oid)
        self.vsst_snapshots = {}
        self.seq = max(self.seq, last_seq)
        self.manifest_bytes = data
        return manifests

    # -- audits ------------------------------------------------------------------

    def check_invariants(self) -> list[str]:
        problems = []
        for reg in self.regions:
            problems += [f"region {reg.index}: {p}" for p in reg.manifest.check_leveled()]
            for k in range(reg.manifest.num_levels):
                for meta in reg.manifest.ssts(k):
                    if meta.id not in self.tables:
                        problems.append(f"region {reg.index}: sst {meta.id} has no table")
                    if meta.kind == SstKind.VSST and (self.config.policy != Policy.VLSM or k != 1):
                        problems.append(f"region {reg.index}: vSST {meta.id} outside L1")
        return problems

    def audit_vssts(self) -> tuple[int, list[str]]:
        """Re-check every live L1 vSST against the L2 snapshot it was cut with.

        Returns ``(checked, problems)``.
        """
        cfg = self.config
        checked, problems = 0, []
        for reg in self.regions:
            for meta in reg.manifest.levels[1].ssts if reg.manifest.num_levels > 1 else []:
                if meta.kind != SstKind.VSST:
                    continue
                snap = self.vsst_snapshots.get(meta.id)
                if snap is None:
                    continue
                l2, tail, max_rec = snap
                overlap = l2.overlap_bytes(meta.min_key, meta.max_key)
                expect = classify_vsst(meta.size_bytes, overlap, cfg.s_min, cfg.s_max, cfg.growth_factor, max_rec, tail)
                checked += 1
                if expect != meta.vsst_class:
                    problems.append(
                        f"vSST {meta.id}: class {meta.vsst_class.name} size {meta.size_bytes} "
                        f"overlap {overlap} tail={tail} -> expected {expect.name if expect else 'none'}"
                    )
        return checked, problems

    def level_sizes(self, region: int = 0) -> list[int]:
        m = self.regions[region].manifest
        return [m.actual(k) for k in range(m.num_levels)]

    def describe(self) -> str:
        lines = []
        for reg in self.regions:
            m = reg.manifest
            for k in range(m.num_levels):
                t = m.targets[k]
                tgt = "inf" if t == float("inf") else f"{int(t)}"
                lines.append(f"r{reg.index} L{k}: {len(m.ssts(k))} ssts, {m.actual(k)} B (target {tgt})")
        return "\n".join(lines)


def open_engine(path: str | os.PathLike, config: EngineConfig, model: DeviceModel | None = None) -> Engine:
    """Open (or create) a file-backed engine under ``path``."""
    path = Path(path)
    model = model or DeviceModel(mode=DeviceMode.SIMULATED if config.deterministic else DeviceMode.FILE)
    device = Device(model, FileStorage(path / OBJECTS_DIR))
    return Engine(config, device, path=path)
