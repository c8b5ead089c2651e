"""Compaction: level manifest, job picking, merging, vSST cutting, chain traces.

Everything here is pure bookkeeping over SST metadata and record lists; the
engine owns the device I/O and the scheduling of jobs on the timeline.
"""

from __future__ import annotations

import bisect
import json
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from .config import EngineConfig, Policy
from .core import Entry, KeyRange, Op, encode_entry, record_is_delete, record_seq
from .errors import NoGoodVssts, UnsortedInput, UnsortedSource
from .sst import SortedRun, SstMeta, SstSizer, VsstClass, check_sorted

# -- manifest ----------------------------------------------------------------


class LevelManifest:
    """Per-level SST membership of one region.

    ``l0`` is ordered oldest first (newest last) and may overlap; levels
    ``1..n-1`` are :class:`SortedRun` objects.  Instances are treated as
    values: the engine swaps in new runs on commit rather than mutating them.
    """

    def __init__(self, targets: Sequence[float], l0: Iterable[SstMeta] = (), levels: Sequence[SortedRun] | None = None):
        self.targets = list(targets)
        self.l0: list[SstMeta] = list(l0)
        n = len(self.targets)
        self.levels: list[SortedRun] = list(levels) if levels is not None else [SortedRun() for _ in range(n)]
        if len(self.levels) != n:
            raise ValueError("levels and targets disagree on the level count")

    @property
    def num_levels(self) -> int:
        return len(self.targets)

    @property
    def last_level(self) -> int:
        return self.num_levels - 1

    def ssts(self, level: int) -> list[SstMeta]:
        return list(self.l0) if level == 0 else self.levels[level].ssts

    def actual(self, level: int) -> int:
        if level == 0:
            return sum(m.size_bytes for m in self.l0)
        return self.levels[level].total

    def ratio(self, level: int) -> float:
        t = self.targets[level]
        return self.actual(level) / t if 0 < t < float("inf") else 0.0

    def ids(self) -> list[list[int]]:
        return [[m.id for m in self.ssts(k)] for k in range(self.num_levels)]

    def all_ssts(self) -> list[SstMeta]:
        out = list(self.l0)
        for run in self.levels[1:]:
            out.extend(run.ssts)
        return out

    def total_bytes(self) -> int:
        return sum(self.actual(k) for k in range(self.num_levels))

    def copy(self) -> "LevelManifest":
        return LevelManifest(self.targets, self.l0, self.levels)

    def check_leveled(self) -> list[str]:
        """Full-scan audit of the leveled invariant; returns problems found."""
        problems = []
        for k in range(1, self.num_levels):
            run = self.levels[k]
            for m in run.ssts:
                if m.level != k:
                    problems.append(f"sst {m.id} tagged L{m.level} but stored in L{k}")
            for a, b in zip(run.ssts, run.ssts[1:]):
                if not a.max_key < b.min_key:
                    problems.append(f"L{k}: sst {a.id} overlaps or precedes sst {b.id}")
        return problems


# -- jobs ----------------------------------------------------------------------


class JobKind(str, Enum):
    FLUSH = "flush"
    INCREMENTAL = "incremental"
    TIERING = "tiering"


@dataclass
class CompactionJob:
    source_level: int
    source_ssts: list[SstMeta]
    target_level: int
    target_ssts: list[SstMeta]
    kind: JobKind = JobKind.INCREMENTAL
    # independent merge groups: (sources, targets) whose outputs cannot collide
    groups: list[tuple[list[SstMeta], list[SstMeta]]] = field(default_factory=list)
    fallback: bool = False

    @property
    def input_ssts(self) -> list[SstMeta]:
        return self.source_ssts + self.target_ssts

    @property
    def source_bytes(self) -> int:
        return sum(m.size_bytes for m in self.source_ssts)

    @property
    def target_bytes(self) -> int:
        return sum(m.size_bytes for m in self.target_ssts)

    @property
    def ids(self) -> set[int]:
        return {m.id for m in self.source_ssts} | {m.id for m in self.target_ssts}

    def describe(self) -> str:
        return (
            f"{self.kind.value} L{self.source_level}->L{self.target_level} "
            f"src={[m.id for m in self.source_ssts]} tgt={[m.id for m in self.target_ssts]}"
        )


def plan_groups(sources: Sequence[SstMeta], target: SortedRun) -> tuple[list[SstMeta], list[tuple[list[SstMeta], list[SstMeta]]]]:
    """Attach overlapping targets to each source and merge colliding groups.

    Each source pulls in exactly the target SSTs intersecting its own range.
    Sources whose extended ranges (own range plus targets) intersect are
    merged into one group so that group outputs never overlap each other or
    any untouched target SST.
    """
    items = []
    for s in sorted(sources, key=lambda m: (m.min_key, m.id)):
        tg = target.overlapping(s.min_key, s.max_key)
        lo = min([s.min_key] + [t.min_key for t in tg])
        hi = max([s.max_key] + [t.max_key for t in tg])
        items.append((lo, hi, s, tg))
    items.sort(key=lambda it: it[0])
    groups: list[tuple[list[SstMeta], list[SstMeta]]] = []
    cur_hi = None
    for lo, hi, s, tg in items:
        if groups and lo <= cur_hi:
            srcs, tgs = groups[-1]
            srcs.append(s)
            seen = {t.id for t in tgs}
            tgs.extend(t for t in tg if t.id not in seen)
            cur_hi = max(cur_hi, hi)
        else:
            groups.append(([s], list(tg)))
            cur_hi = hi
    age = {m.id: i for i, m in enumerate(sources)}
    targets: list[SstMeta] = []
    for srcs, tgs in groups:
        srcs.sort(key=lambda m: age[m.id])
        tgs.sort(key=lambda m: m.min_key)
        targets.extend(tgs)
    return targets, groups


def make_job(manifest: LevelManifest, level: int, sources: Sequence[SstMeta], policy: Policy, fallback: bool = False) -> CompactionJob:
    target_level = level + 1
    targets, groups = plan_groups(sources, manifest.levels[target_level])
    kind = JobKind.TIERING if (level == 0 and policy.tiered) else JobKind.INCREMENTAL
    return CompactionJob(level, list(sources), target_level, targets, kind, groups, fallback)


# -- source selection ----------------------------------------------------------


def overlap_ratio(m: SstMeta, next_run: SortedRun) -> float:
    return next_run.overlap_bytes(m.min_key, m.max_key) / m.size_bytes


def _targets_free(m: SstMeta, next_run: SortedRun, busy: set[int] | frozenset) -> bool:
    if not busy:
        return True
    return all(t.id not in busy for t in next_run.overlapping(m.min_key, m.max_key))


def pick_min_overlap(candidates: Iterable[SstMeta], next_run: SortedRun) -> SstMeta | None:
    """Lowest (overlap ratio, -size, id) SST, the picker used for levels >= 1."""
    best = None
    best_key = None
    for m in candidates:
        key = (overlap_ratio(m, next_run), -m.size_bytes, m.id)
        if best_key is None or key < best_key:
            best, best_key = m, key
    return best


def pick_l1_victims(
    l1: Sequence[SstMeta],
    l2: SortedRun,
    needed_bytes: int,
    s_max: int,
    rng: random.Random,
    sample_size: int = 50,
) -> list[SstMeta]:
    """Good vSSTs from a random sample, lowest overlap ratio first.

    Samples ``min(sample_size, len(l1))`` vSSTs, keeps the Good ones and
    takes them in ascending (ratio, -size, id) order until the cumulative size
    reaches ``max(needed_bytes, s_max)``.

    Raises:
        NoGoodVssts: the sample holds no Good vSST.
    """
    pool = list(l1)
    sample = rng.sample(pool, min(sample_size, len(pool))) if pool else []
    good = [m for m in sample if m.vsst_class == VsstClass.GOOD]
    if not good:
        raise NoGoodVssts(f"no good vSST among {len(sample)} sampled")
    good.sort(key=lambda m: (overlap_ratio(m, l2), -m.size_bytes, m.id))
    want = max(needed_bytes, s_max)
    out, total = [], 0
    for m in good:
        out.append(m)
        total += m.size_bytes
        if total >= want:
            break
    return out


def pick_poor_fallback(l1: Sequence[SstMeta], l2: SortedRun) -> SstMeta | None:
    return pick_min_overlap(l1, l2)


def select_sources(
    manifest: LevelManifest,
    level: int,
    config: EngineConfig,
    *,
    needed: int = 0,
    busy: set[int] | frozenset = frozenset(),
    rng: random.Random | None = None,
) -> tuple[list[SstMeta], bool]:
    """Source SSTs for a job out of ``level``; returns ``(sources, fallback)``.

    Tiered policies take all of L0; queue policies take the oldest L0 SST.
    Under vLSM, L1 sources come from :func:`pick_l1_victims` (with the Poor
    fallback on :class:`NoGoodVssts`); otherwise one SST with the lowest
    overlap ratio against the next level.
    """
    policy = config.policy
    if level == 0:
        l0 = manifest.l0
        if not l0 or any(m.id in busy for m in l0):
            return [], False
        return (list(l0) if policy.tiered else [l0[0]]), False
    nxt = manifest.levels[level + 1]
    cands = [m for m in manifest.levels[level].ssts if m.id not in busy and _targets_free(m, nxt, busy)]
    if not cands:
        return [], False
    if policy == Policy.VLSM and level == 1:
        rng = rng if rng is not None else random.Random(config.seed)
        try:
            return pick_l1_victims(cands, nxt, needed, config.s_max, rng, config.victim_sample), False
        except NoGoodVssts:
            m = pick_poor_fallback(cands, nxt)
            return ([m] if m is not None else []), True
    m = pick_min_overlap(cands, nxt)
    return ([m] if m is not None else []), False


def level_scores(manifest: LevelManifest, config: EngineConfig) -> list[tuple[float, int]]:
    """``(score, level)`` for every level that currently wants compaction."""
    out = []
    n0 = len(manifest.l0)
    if n0 >= config.l0_max_ssts:
        out.append((n0 / config.l0_max_ssts, 0))
    for k in range(1, manifest.last_level):
        r = manifest.ratio(k)
        if r > 1.0:
            out.append((r, k))
    return out


def pick_level(manifest: LevelManifest, config: EngineConfig) -> int | None:
    """Which level to compact next, or None.

    Priority: L0 at capacity; then the level with the highest actual/target
    ratio above 1 (ties to the lowest level); then, for queue policies, any
    non-empty L0.
    """
    if len(manifest.l0) >= config.l0_max_ssts:
        return 0
    best = None
    for k in range(1, manifest.last_level):
        r = manifest.ratio(k)
        if r > 1.0 and (best is None or r > best[0]):
            best = (r, k)
    if best is not None:
        return best[1]
    if manifest.l0 and not config.policy.tiered:
        return 0
    return None


def pick_compaction(
    manifest: LevelManifest,
    config: EngineConfig,
    *,
    busy: set[int] | frozenset = frozenset(),
    rng: random.Random | None = None,
) -> CompactionJob | None:
    """The highest-priority job for ``manifest``, ignoring room downstream."""
    level = pick_level(manifest, config)
    if level is None:
        return None
    needed = max(0, manifest.actual(level) - int(manifest.targets[level])) if level else 0
    sources, fallback = select_sources(manifest, level, config, needed=needed, busy=busy, rng=rng)
    if not sources:
        return None
    return make_job(manifest, level, sources, config.policy, fallback)


# -- merging -------------------------------------------------------------------


def merge_runs(
    sources: Sequence[tuple[Sequence[bytes], Sequence[bytes]]],
    drop_tombstones: bool = False,
) -> tuple[list[bytes], list[bytes]]:
    """Merge sorted ``(keys, records)`` runs given oldest first.

    On duplicate keys the record from the later source wins, which is the
    newest version as long as runs are passed in age order (deeper level
    first, then upper level; L0 oldest to newest).
    """
    if len(sources) == 1:
        keys, recs = list(sources[0][0]), list(sources[0][1])
        if drop_tombstones:
            keep = [i for i, r in enumerate(recs) if not record_is_delete(r)]
            if len(keep) != len(recs):
                keys = [keys[i] for i in keep]
                recs = [recs[i] for i in keep]
        return keys, recs
    best: dict[bytes, bytes] = {}
    for keys, recs in sources:
        best.update(zip(keys, recs))
    keys = sorted(best)
    recs = [best[k] for k in keys]
    if drop_tombstones:
        pairs = [(k, r) for k, r in zip(keys, recs) if not record_is_delete(r)]
        keys = [k for k, _ in pairs]
        recs = [r for _, r in pairs]
    return keys, recs


def merge_streams(sources: Sequence[Sequence[Entry]], drop_tombstones: bool = False) -> list[Entry]:
    """Merge sorted entry streams; the highest seq per key survives.

    Raises:
        UnsortedSource: a source is not strictly ascending by key.
    """
    best: dict[bytes, Entry] = {}
    for i, src in enumerate(sources):
        for a, b in zip(src, src[1:]):
            if not a.key < b.key:
                raise UnsortedSource(f"source {i}: {b.key!r} follows {a.key!r}")
        for e in src:
            cur = best.get(e.key)
            if cur is None or e.seq > cur.seq:
                best[e.key] = e
    out = [best[k] for k in sorted(best)]
    if drop_tombstones:
        out = [e for e in out if e.op != Op.DELETE]
    return out


# -- output cutting ------------------------------------------------------------


def split_fixed(keys: Sequence[bytes], recs: Sequence[bytes], s_max: int, sizer: SstSizer) -> list[tuple[int, int]]:
    """Cut a merged run into ``[start, end)`` slices of at most ``s_max`` bytes."""
    cuts = []
    start = 0
    sizer.reset()
    for i, (k, r) in enumerate(zip(keys, recs)):
        if sizer.n and sizer.size_with(len(r), len(k)) > s_max:
            cuts.append((start, i))
            start = i
            sizer.reset()
        sizer.add(len(r), len(k))
    if start < len(recs):
        cuts.append((start, len(recs)))
    return cuts


@dataclass(frozen=True)
class VsstCut:
    start: int
    end: int
    vsst_class: VsstClass
    size: int
    overlap_bytes: int
    tail: bool = False

    @property
    def overlap_ratio(self) -> float:
        return self.overlap_bytes / self.size if self.size else 0.0


class VsstCutState:
    """Incremental overlap tracking for the vSST being built.

    The L2 cursor only moves forward because keys arrive in order, so each
    append costs O(1) amortised.
    """

    __slots__ = ("l2", "lo_idx", "hi_idx", "prefix", "n")

    def __init__(self, l2: SortedRun) -> None:
        self.l2 = l2
        self.prefix = l2._prefix
        self.n = len(l2)
        self.lo_idx = 0
        self.hi_idx = 0

    def start(self, key: bytes) -> None:
        self.lo_idx = bisect.bisect_left(self.l2.maxs, key)
        self.hi_idx = max(self.hi_idx, self.lo_idx)
        self._advance(key)

    def _advance(self, key: bytes) -> None:
        mins = self.l2.mins
        while self.hi_idx < self.n and mins[self.hi_idx] <= key:
            self.hi_idx += 1

    def overlap_with(self, key: bytes) -> int:
        """Overlap bytes if ``key`` became the vSST's new maximum."""
        mins = self.l2.mins
        j = self.hi_idx
        while j < self.n and mins[j] <= key:
            j += 1
        return self.prefix[j] - self.prefix[self.lo_idx] if j > self.lo_idx else 0

    def extend(self, key: bytes) -> int:
        self._advance(key)
        return self.prefix[self.hi_idx] - self.prefix[self.lo_idx] if self.hi_idx > self.lo_idx else 0


def cut_vssts(
    keys: Sequence[bytes],
    recs: Sequence[bytes],
    l2: SortedRun,
    s_min: int,
    s_max: int,
    f: float,
    sizer: SstSizer,
) -> list[VsstCut]:
    """Partition a merged run into overlap-aware vSSTs.

    Per key, with ``O`` the overlap ratio against ``l2`` if the key joined:

    * below ``s_min`` the key is always appended;
    * appending past ``s_max`` closes the current vSST as Good first;
    * at or above ``s_min``, a key that would push ``O`` over ``f`` closes
      the current (still Good) vSST first;
    * the first time the size reaches ``s_min``, ``O > f`` closes it as Poor.

    The trailing vSST is classified by its final ratio and flagged as a tail.

    Raises:
        UnsortedInput: keys are not strictly ascending.
    """
    out: list[VsstCut] = []
    state = VsstCutState(l2)
    sizer.reset()
    start = 0
    overlap = 0
    prev_key = None
    size = 0
    for i in range(len(keys)):
        k = keys[i]
        r = recs[i]
        if prev_key is not None and not prev_key < k:
            raise UnsortedInput(f"key #{i} {k!r} does not follow {prev_key!r}")
        prev_key = k
        if sizer.n:
            size_next = sizer.size_with(len(r), len(k))
            if size_next > s_max:
                cls = VsstClass.GOOD if overlap <= f * size else VsstClass.POOR
                out.append(VsstCut(start, i, cls, size, overlap))
                sizer.reset()
            elif size >= s_min and state.overlap_with(k) > f * size_next:
                out.append(VsstCut(start, i, VsstClass.GOOD, size, overlap))
                sizer.reset()
        if not sizer.n:
            start = i
            state.start(k)
        before = size if sizer.n else 0
        sizer.add(len(r), len(k))
        size = sizer.size
        overlap = state.extend(k)
        if before < s_min <= size and overlap > f * size:
            out.append(VsstCut(start, i + 1, VsstClass.POOR, size, overlap))
            sizer.reset()
    if sizer.n:
        cls = VsstClass.GOOD if overlap <= f * size else VsstClass.POOR
        out.append(VsstCut(start, len(keys), cls, size, overlap, tail=True))
    return out


def classify_vsst(size: int, overlap: int, s_min: int, s_max: int, f: float, max_record: int, tail: bool = False) -> VsstClass | None:
    """Class implied by the invariant for a finished vSST, or None if none fits.

    Good: ratio <= f and size in [s_min, s_max] (tails may be smaller).
    Poor: ratio > f and size within one record of s_min (tails may be smaller).
    """
    good_ratio = overlap <= f * size
    if good_ratio and size <= s_max and (size >= s_min or tail):
        return VsstClass.GOOD
    if not good_ratio and (s_min <= size < s_min + max_record or (tail and size < s_min)):
        return VsstClass.POOR
    return None


# -- chain traces ---------------------------------------------------------------


class Trigger(str, Enum):
    MEMTABLE_FLUSH_BLOCKED = "MemtableFlushBlocked"
    LEVEL_OVER_TARGET = "LevelOverTarget"
    L0_COMPACTION = "L0Compaction"

    @property
    def from_l0(self) -> bool:
        return self != Trigger.LEVEL_OVER_TARGET


@dataclass
class Stage:
    level: int  # source level of the job
    bytes_read: int
    bytes_written: int
    kind: str = JobKind.INCREMENTAL.value
    start_ns: int = 0
    end_ns: int = 0

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "bytes_read": self.bytes_read,
            "bytes_written": self.bytes_written,
            "kind": self.kind,
            "start_ns": self.start_ns,
            "end_ns": self.end_ns,
        }


@dataclass
class ChainTrace:
    trigger: Trigger
    root_level: int
    region: int = 0
    opened_ns: int = 0
    closed_ns: int | None = None
    stages: list[Stage] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len({s.level for s in self.stages})

    @property
    def width_per_level(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for s in self.stages:
            out[s.level] = out.get(s.level, 0) + s.bytes_read
        return dict(sorted(out.items()))

    @property
    def total_bytes(self) -> int:
        return sum(s.bytes_read for s in self.stages)

    @property
    def total_written(self) -> int:
        return sum(s.bytes_written for s in self.stages)

    def to_dict(self) -> dict:
        return {
            "trigger": self.trigger.value,
            "root_level": self.root_level,
            "region": self.region,
            "opened_ns": self.opened_ns,
            "closed_ns": self.closed_ns,
            "stages": [s.to_dict() for s in self.stages],
            "length": self.length,
            "width_per_level": {str(k): v for k, v in self.width_per_level.items()},
            "total_bytes": self.total_bytes,
        }


def chains_to_jsonl(chains: Iterable[ChainTrace]) -> str:
    return "".join(json.dumps(c.to_dict(), sort_keys=False) + "\n" for c in chains)


def chains_from_jsonl(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]


# -- helpers for tests and tools --------------------------------------------------


def entries_to_run(entries: Sequence[Entry]) -> tuple[list[bytes], list[bytes]]:
    keys = [e.key for e in entries]
    check_sorted(keys)
    return keys, [encode_entry(e) for e in entries]


def newest_seq(recs: Sequence[bytes]) -> int:
    return max(record_seq(r) for r in recs)


def key_range(ssts: Sequence[SstMeta]) -> KeyRange:
    return KeyRange(min(m.min_key for m in ssts), max(m.max_key for m in ssts))
