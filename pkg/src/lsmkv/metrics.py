"""Latency histograms, amplification, chain statistics and report export."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .device import DeviceStats
from .errors import EmptyHistogram
from .workload import NS_PER_S, OP_BY_TAG, LatencyReport, OpType

SCHEMA_VERSION = 1


# -- histogram -------------------------------------------------------------------


class LatencyRecorder:
    """Log-bucketed histogram with a fixed number of significant decimal digits.

    Values are nanoseconds.  Each power-of-two bucket is split into linear
    sub-buckets so that any recorded value is represented within a relative
    error of ``1 / sub_bucket_half_count`` (below ``10 ** -digits``).

    Args:
        digits: significant decimal digits (1..5).
        lowest_ns: values below this are recorded as ``lowest_ns``.
        highest_ns: values above this are recorded as ``highest_ns``.
    """

    def __init__(self, digits: int = 3, lowest_ns: int = 1, highest_ns: int = 1000 * NS_PER_S) -> None:
        if not 1 <= digits <= 5:
            raise ValueError("digits must lie in 1..5")
        self.digits = digits
        self.lowest = max(1, int(lowest_ns))
        self.highest = int(highest_ns)
        largest_single_unit = 2 * 10**digits
        self.sub_half_mag = max(0, math.ceil(math.log2(largest_single_unit)) - 1)
        self.sub_half = 1 << self.sub_half_mag
        self.sub_count = self.sub_half << 1
        self.sub_mask = self.sub_count - 1
        top_bucket = self._bucket_of(self.highest)
        self.counts = np.zeros((top_bucket + 2) * self.sub_half, dtype=np.int64)
        self.total = 0
        self.min = 0
        self.max = 0

    def _bucket_of(self, v: int) -> int:
        return max(0, (v | self.sub_mask).bit_length() - 1 - self.sub_half_mag)

    def _indices(self, v: np.ndarray) -> np.ndarray:
        _, exp = np.frexp((v | self.sub_mask).astype(np.float64))
        bucket = np.maximum(exp.astype(np.int64) - 1 - self.sub_half_mag, 0)
        sub = v >> bucket
        return ((bucket + 1) << self.sub_half_mag) + (sub - self.sub_half)

    def _value_at(self, index: int) -> tuple[int, int]:
        """``(lowest, highest)`` value equivalent to counts slot ``index``."""
        bucket = (index >> self.sub_half_mag) - 1
        sub = (index & (self.sub_half - 1)) + self.sub_half
        if bucket < 0:
            sub -= self.sub_half
            bucket = 0
        lo = sub << bucket
        return lo, lo + (1 << bucket) - 1

    def record(self, value_ns: int, count: int = 1) -> None:
        self.record_many(np.full(count, value_ns, dtype=np.int64))

    def record_many(self, values: Sequence[int] | np.ndarray) -> None:
        v = np.asarray(values, dtype=np.int64)
        if v.size == 0:
            return
        v = np.clip(v, self.lowest, self.highest)
        idx = self._indices(v)
        self.counts += np.bincount(idx, minlength=len(self.counts))[: len(self.counts)]
        vmin, vmax = int(v.min()), int(v.max())
        self.min = vmin if self.total == 0 else min(self.min, vmin)
        self.max = max(self.max, vmax)
        self.total += int(v.size)

    def merge(self, other: "LatencyRecorder") -> "LatencyRecorder":
        """Fold ``other`` into ``self``; associative and order-independent."""
        if (other.digits, other.lowest, other.highest) != (self.digits, self.lowest, self.highest):
            raise ValueError("cannot merge recorders with different layouts")
        if other.total:
            self.counts += other.counts
            self.min = other.min if self.total == 0 else min(self.min, other.min)
            self.max = max(self.max, other.max)
            self.total += other.total
        return self

    @property
    def count(self) -> int:
        return self.total

    def percentile(self, p: float) -> int:
        """Nearest-rank percentile, reported as the bucket's highest equivalent value.

        Raises:
            EmptyHistogram: nothing has been recorded.
            ValueError: ``p`` outside (0, 100].
        """
        if self.total == 0:
            raise EmptyHistogram("percentile of an empty histogram")
        if not 0 < p <= 100:
            raise ValueError("p must lie in (0, 100]")
        rank = max(1, math.ceil(p / 100.0 * self.total))
        idx = int(np.searchsorted(np.cumsum(self.counts), rank, side="left"))
        _, hi = self._value_at(idx)
        return int(min(max(hi, self.min), self.max))

    def mean(self) -> float:
        if self.total == 0:
            raise EmptyHistogram("mean of an empty histogram")
        nz = np.nonzero(self.counts)[0]
        mids = np.array([sum(self._value_at(int(i))) / 2 for i in nz])
        return float(np.dot(mids, self.counts[nz]) / self.total)


def percentile(recorder: LatencyRecorder, p: float) -> int:
    return recorder.percentile(p)


def exact_percentile(values: Sequence[int] | np.ndarray, p: float) -> int:
    """Nearest-rank percentile of raw values (sort oracle)."""
    v = np.sort(np.asarray(values, dtype=np.int64))
    if v.size == 0:
        raise EmptyHistogram("percentile of no samples")
    rank = max(1, math.ceil(p / 100.0 * v.size))
    return int(v[rank - 1])


# -- scalar metrics ---------------------------------------------------------------


def io_amplification(stats: DeviceStats, user_bytes: int) -> tuple[float, float, float]:
    """``(write_amp, read_amp, combined)`` of device traffic per user byte."""
    if user_bytes <= 0:
        raise ValueError("user_bytes must be positive")
    w = stats.bytes_written / user_bytes
    r = stats.bytes_read / user_bytes
    return w, r, w + r


def cpu_per_op(process_cpu_ns: int, completed_ops: int) -> float:
    if completed_ops <= 0:
        raise ValueError("completed_ops must be positive")
    return process_cpu_ns / completed_ops


def throughput_timeseries(completions_ns: np.ndarray, start_ns: int, end_ns: int, bin_ns: int = NS_PER_S) -> list[tuple[float, float]]:
    """``(bin start in seconds, completions per second)`` for each bin of the run."""
    if end_ns <= start_ns:
        return []
    nbins = max(1, math.ceil((end_ns - start_ns) / bin_ns))
    rel = np.asarray(completions_ns, dtype=np.int64) - start_ns
    idx = np.clip(rel // bin_ns, 0, nbins - 1)
    counts = np.bincount(idx, minlength=nbins)
    scale = NS_PER_S / bin_ns
    return [(round(i * bin_ns / NS_PER_S, 9), float(c * scale)) for i, c in enumerate(counts)]


@dataclass
class ChainStats:
    count: int = 0
    l0_count: int = 0
    mean_width_per_level: dict[str, float] = field(default_factory=dict)
    mean_stage_width: float = 0.0
    mean_length: float = 0.0
    max_length: int = 0
    mean_total_bytes: float = 0.0
    mean_l0_total_bytes: float = 0.0


def chain_stats(chains: Iterable) -> ChainStats:
    """Aggregate :class:`~lsmkv.compaction.ChainTrace` objects."""
    chains = [c for c in chains if c.stages]
    if not chains:
        return ChainStats()
    widths: dict[int, list[int]] = {}
    stage_widths = []
    for c in chains:
        for lvl, w in c.width_per_level.items():
            widths.setdefault(lvl, []).append(w)
        stage_widths.extend(s.bytes_read for s in c.stages)
    l0 = [c for c in chains if c.trigger.from_l0]
    return ChainStats(
        count=len(chains),
        l0_count=len(l0),
        mean_width_per_level={str(k): float(np.mean(v)) for k, v in sorted(widths.items())},
        mean_stage_width=float(np.mean(stage_widths)),
        mean_length=float(np.mean([c.length for c in chains])),
        max_length=max(c.length for c in chains),
        mean_total_bytes=float(np.mean([c.total_bytes for c in chains])),
        mean_l0_total_bytes=float(np.mean([c.total_bytes for c in l0])) if l0 else 0.0,
    )


# -- report ---------------------------------------------------------------------


@dataclass
class OpLatency:
    count: int = 0
    p50_ns: int = 0
    p90_ns: int = 0
    p99_ns: int = 0
    max_ns: int = 0


@dataclass
class Report:
    schema_version: int = SCHEMA_VERSION
    workload: str = ""
    policy: str = ""
    rate: float = 0.0
    ops_completed: int = 0
    duration_ns: int = 0
    achieved_ops_per_s: float = 0.0
    latency: dict[str, OpLatency] = field(default_factory=dict)
    stall_total_ns: int = 0
    stall_max_ns: int = 0
    stall_count: int = 0
    bytes_written: int = 0
    bytes_read: int = 0
    user_bytes: int = 0
    write_amp: float = 0.0
    read_amp: float = 0.0
    combined_amp: float = 0.0
    chain_stats: ChainStats = field(default_factory=ChainStats)
    cpu_per_op_ns: float | None = None
    rate_unachievable: bool = False
    throughput_timeseries: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["throughput_timeseries"] = [list(p) for p in self.throughput_timeseries]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        d = dict(d)
        d["latency"] = {k: OpLatency(**v) for k, v in d.get("latency", {}).items()}
        d["chain_stats"] = ChainStats(**d.get("chain_stats", {}))
        d["throughput_timeseries"] = [tuple(p) for p in d.get("throughput_timeseries", [])]
        return cls(**d)

    def scalars(self) -> dict[str, float | int | str | None]:
        """Flat scalar view used by CSV exports."""
        out: dict[str, float | int | str | None] = {
            "schema_version": self.schema_version,
            "workload": self.workload,
            "policy": self.policy,
            "rate": self.rate,
            "ops_completed": self.ops_completed,
            "duration_ns": self.duration_ns,
            "achieved_ops_per_s": self.achieved_ops_per_s,
        }
        for op in ("all", "read", "update", "insert"):
            lat = self.latency.get(op, OpLatency())
            for f in ("count", "p50_ns", "p90_ns", "p99_ns", "max_ns"):
                out[f"{op}_{f}"] = getattr(lat, f)
        out.update(
            stall_total_ns=self.stall_total_ns,
            stall_max_ns=self.stall_max_ns,
            stall_count=self.stall_count,
            bytes_written=self.bytes_written,
            bytes_read=self.bytes_read,
            user_bytes=self.user_bytes,
            write_amp=self.write_amp,
            read_amp=self.read_amp,
            combined_amp=self.combined_amp,
            chain_count=self.chain_stats.count,
            chain_mean_stage_width=self.chain_stats.mean_stage_width,
            chain_mean_length=self.chain_stats.mean_length,
            chain_max_length=self.chain_stats.max_length,
            chain_mean_total_bytes=self.chain_stats.mean_total_bytes,
            chain_mean_l0_total_bytes=self.chain_stats.mean_l0_total_bytes,
            cpu_per_op_ns=self.cpu_per_op_ns,
            rate_unachievable=int(self.rate_unachievable),
        )
        return out


CSV_COLUMNS = list(Report().scalars().keys())


def _op_latency(values: np.ndarray, digits: int) -> OpLatency:
    if values.size == 0:
        return OpLatency()
    rec = LatencyRecorder(digits)
    rec.record_many(values)
    return OpLatency(rec.count, rec.percentile(50), rec.percentile(90), rec.percentile(99), rec.max)


def build_report(
    lr: LatencyReport,
    *,
    policy: str = "",
    include_cpu: bool = True,
    digits: int = 3,
    bin_ns: int = NS_PER_S,
) -> Report:
    """Summarise a raw :class:`LatencyReport`."""
    duration = lr.end_ns - lr.start_ns
    lat = {"all": _op_latency(lr.latencies(), digits)}
    for tag, op in sorted(OP_BY_TAG.items()):
        vals = lr.latencies(op)
        if vals.size:
            lat[op.value] = _op_latency(vals, digits)
    stalls = [b - a for a, b in lr.stalls]
    if lr.user_bytes > 0:
        w, r, c = io_amplification(lr.device, lr.user_bytes)
    else:
        w = r = c = 0.0
    cs = chain_stats(lr.chains)
    return Report(
        workload=lr.workload,
        policy=policy,
        rate=lr.rate,
        ops_completed=lr.count,
        duration_ns=duration,
        achieved_ops_per_s=lr.count * NS_PER_S / duration if duration > 0 else 0.0,
        latency=lat,
        stall_total_ns=int(sum(stalls)),
        stall_max_ns=int(max(stalls, default=0)),
        stall_count=len(stalls),
        bytes_written=lr.device.bytes_written,
        bytes_read=lr.device.bytes_read,
        user_bytes=lr.user_bytes,
        write_amp=w,
        read_amp=r,
        combined_amp=c,
        chain_stats=cs,
        cpu_per_op_ns=cpu_per_op(lr.cpu_ns, lr.count) if include_cpu and lr.count else None,
        rate_unachievable=lr.rate_unachievable,
        throughput_timeseries=throughput_timeseries(lr.completion_ns, lr.start_ns, lr.end_ns, bin_ns),
    )


def export_report(report: Report, fmt: str = "json") -> bytes:
    """Serialise a report as JSON (full) or CSV (one header row, one value row)."""
    if fmt == "json":
        return (json.dumps(report.to_dict(), indent=2) + "\n").encode()
    if fmt == "csv":
        return rows_to_csv([report.scalars()], CSV_COLUMNS)
    raise ValueError(f"unknown format {fmt!r}")


def timeseries_csv(report: Report) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t_s", "ops_per_s"])
    for t, v in report.throughput_timeseries:
        w.writerow([t, v])
    return buf.getvalue().encode()


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> bytes:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in columns})
    return buf.getvalue().encode()


def dump_latencies(lr: LatencyReport) -> bytes:
    """Raw per-request records: ``u8 op tag`` + ``u64 latency ns``, little-endian."""
    rec = np.empty(lr.count, dtype=[("op", "u1"), ("ns", "<u8")])
    rec["op"] = lr.op_tags
    rec["ns"] = lr.latency_ns
    return rec.tobytes()


def load_latencies(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    rec = np.frombuffer(buf, dtype=[("op", "u1"), ("ns", "<u8")])
    return rec["op"].copy(), rec["ns"].astype(np.int64)


def op_name(tag: int) -> str:
    return OP_BY_TAG[tag].value


__all__ = [
    "CSV_COLUMNS",
    "ChainStats",
    "LatencyRecorder",
    "OpLatency",
    "OpType",
    "Report",
    "build_report",
    "chain_stats",
    "cpu_per_op",
    "dump_latencies",
    "exact_percentile",
    "export_report",
    "io_amplification",
    "load_latencies",
    "percentile",
    "throughput_timeseries",
    "timeseries_csv",
]
