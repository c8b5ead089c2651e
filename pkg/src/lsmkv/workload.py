"""YCSB-style workloads and the open-loop fixed-rate harness.

The harness keeps an implicit unbounded FIFO queue: request ``i`` is issued
at ``start + i / rate`` on the engine's clock no matter how slowly earlier
requests complete, and the first free client worker serves it.  Latency is
completion time minus issue time, so queueing delay is always included.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from typing import Any, Callable

import numpy as np

from .device import DeviceStats
from .errors import ConfigError, LsmError

NS_PER_S = 1_000_000_000
GENERATOR_MAX_RATE = 1_500_000.0  # requests/s one generator thread can pace
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class RateUnachievable(LsmError, RuntimeWarning):
    """The requested rate exceeds what the generator can pace."""


class OpType(str, Enum):
    READ = "read"
    UPDATE = "update"
    INSERT = "insert"

    @property
    def tag(self) -> int:
        return _OP_TAGS[self]


_OP_TAGS = {OpType.READ: 0, OpType.UPDATE: 1, OpType.INSERT: 2}
OP_BY_TAG = {v: k for k, v in _OP_TAGS.items()}


class KeyDist(str, Enum):
    UNIFORM = "uniform"
    ZIPFIAN = "zipfian"
    PARETO = "pareto"
    LATEST = "latest"


# -- hashing / keys ------------------------------------------------------------


def fnv64(x: int) -> int:
    """FNV-1a over the 8 little-endian bytes of ``x``."""
    h = FNV_OFFSET
    for _ in range(8):
        h ^= x & 0xFF
        h = (h * FNV_PRIME) & _MASK64
        x >>= 8
    return h


def fnv64_array(x: np.ndarray) -> np.ndarray:
    """Vectorised :func:`fnv64` (uint64 arithmetic wraps like the scalar mask)."""
    x = x.astype(np.uint64)
    h = np.full(x.shape, FNV_OFFSET, dtype=np.uint64)
    prime = np.uint64(FNV_PRIME)
    with np.errstate(over="ignore"):
        for shift in range(0, 64, 8):
            h ^= (x >> np.uint64(shift)) & np.uint64(0xFF)
            h *= prime
    return h


def key_for(index: int, key_size: int = 24, prefix: bytes = b"user") -> bytes:
    """Key of record ``index``: prefix, 8-byte hashed index, zero padding."""
    body = prefix + fnv64(index).to_bytes(8, "big")
    if key_size < len(body):
        raise ConfigError(f"key_size must be >= {len(body)}")
    return body + b"\0" * (key_size - len(body))


# -- distributions ---------------------------------------------------------------


def zeta(n: int, theta: float) -> float:
    return float(np.sum(1.0 / np.arange(1, n + 1, dtype=np.float64) ** theta))


@dataclass
class ZipfianState:
    """Parameters of the YCSB Zipfian generator over ``n`` ranks."""

    n: int
    theta: float = 0.99
    zetan: float = field(init=False)
    alpha: float = field(init=False)
    eta: float = field(init=False)
    half_pow: float = field(init=False)

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ConfigError("zipfian needs n >= 1")
        if not 0.0 <= self.theta < 1.0:
            raise ConfigError("zipfian theta must lie in [0, 1)")
        self.zetan = zeta(self.n, self.theta)
        zeta2 = zeta(min(self.n, 2), self.theta)
        self.alpha = 1.0 / (1.0 - self.theta)
        self.half_pow = 0.5**self.theta
        denom = 1.0 - zeta2 / self.zetan
        self.eta = (1.0 - (2.0 / self.n) ** (1.0 - self.theta)) / denom if denom > 0 else 1.0

    def top_mass(self) -> float:
        """Probability of rank 0."""
        return 1.0 / self.zetan

    def ranks(self, u: np.ndarray) -> np.ndarray:
        """Map uniforms in [0, 1) to ranks in [0, n)."""
        if self.n == 1:
            return np.zeros(u.shape, dtype=np.int64)
        uz = u * self.zetan
        r = (self.n * (self.eta * u - self.eta + 1.0) ** self.alpha).astype(np.int64)
        r = np.where(uz < 1.0 + self.half_pow, 1, r)
        r = np.where(uz < 1.0, 0, r)
        return np.clip(r, 0, self.n - 1)


def zipfian_next(state: ZipfianState, rng: np.random.Generator, size: int | None = None, scramble: bool = True):
    """Scrambled Zipfian draw(s) in ``[0, state.n)``."""
    u = rng.random(1 if size is None else size)
    r = state.ranks(u)
    if scramble:
        r = (fnv64_array(r) % np.uint64(state.n)).astype(np.int64)
    return int(r[0]) if size is None else r


def pareto_next(rng: np.random.Generator, key_count: int, shape: float = 1.16, scale: float = 1.0, size: int | None = None):
    """Inverse-CDF Pareto index draw(s), clamped to ``[0, key_count)``."""
    if shape <= 0 or scale <= 0:
        raise ConfigError("pareto shape and scale must be positive")
    u = rng.random(1 if size is None else size)
    x = scale * (1.0 - u) ** (-1.0 / shape)
    idx = np.floor(x - scale)
    idx = np.clip(idx, 0, key_count - 1).astype(np.int64)
    return int(idx[0]) if size is None else idx


def pareto_index_cdf(k: np.ndarray, shape: float = 1.16, scale: float = 1.0) -> np.ndarray:
    """P(index <= k) of the unclamped discrete Pareto index."""
    k = np.asarray(k, dtype=np.float64)
    return 1.0 - (scale / (k + 1.0 + scale)) ** shape


# -- workload spec ---------------------------------------------------------------

PRESETS: dict[str, dict[str, Any]] = {
    "LoadA": dict(read=0.0, update=0.0, insert=1.0, key_dist=KeyDist.UNIFORM),
    "RunA": dict(read=0.5, update=0.5, insert=0.0, key_dist=KeyDist.ZIPFIAN),
    "RunB": dict(read=0.95, update=0.05, insert=0.0, key_dist=KeyDist.ZIPFIAN),
    "RunC": dict(read=1.0, update=0.0, insert=0.0, key_dist=KeyDist.ZIPFIAN),
    "RunD": dict(read=0.95, update=0.0, insert=0.05, key_dist=KeyDist.LATEST),
}


@dataclass(frozen=True)
class WorkloadSpec:
    name: str = "LoadA"
    read: float = 0.0
    update: float = 0.0
    insert: float = 1.0
    key_dist: KeyDist = KeyDist.UNIFORM
    zipf_theta: float = 0.99
    pareto_shape: float = 1.16
    pareto_scale: float = 1.0
    key_count: int = 1_000_000
    key_size: int = 24
    value_size: int = 176
    op_count: int = 2_000_000
    rate: float = 50_000.0
    client_threads: int = 15
    seed: int = 42
    warmup_fraction: float = 0.1

    def __post_init__(self) -> None:
        object.__setattr__(self, "key_dist", KeyDist(self.key_dist))
        total = self.read + self.update + self.insert
        if not math.isclose(total, 1.0, abs_tol=1e-9):
            raise ConfigError(f"op mix sums to {total}, expected 1")
        if min(self.read, self.update, self.insert) < 0:
            raise ConfigError("op mix fractions must be non-negative")
        if self.key_count < 1 or self.op_count < 0 or self.client_threads < 1 or self.rate <= 0:
            raise ConfigError("key_count, client_threads and rate must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1)")

    @classmethod
    def preset(cls, name: str, **overrides: Any) -> "WorkloadSpec":
        if name not in PRESETS:
            raise ConfigError(f"unknown workload {name!r}; choose from {sorted(PRESETS)} or build a Custom spec")
        kw = dict(PRESETS[name])
        if name == "LoadA" and "op_count" not in overrides:
            kw["op_count"] = overrides.get("key_count", cls.key_count)
        kw.update(overrides)
        return cls(name=name, **kw)

    @property
    def kv_size(self) -> int:
        return self.key_size + self.value_size

    def with_(self, **changes: Any) -> "WorkloadSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["key_dist"] = self.key_dist.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown workload fields: {sorted(unknown)}")
        name = d.get("name", "LoadA")
        if name in PRESETS and not {"read", "update", "insert"} & set(d):
            return cls.preset(name, **{k: v for k, v in d.items() if k != "name"})
        return cls(**d)


@dataclass(slots=True)
class Request:
    op: OpType
    key: bytes
    value: bytes
    issue_ns: int
    index: int = 0


class RequestStream:
    """Deterministic, random-access request sequence for one spec.

    Op types and key indices are drawn up front with numpy; values are
    generated in seeded chunks on demand.
    """

    CHUNK = 1 << 14

    def __init__(self, spec: WorkloadSpec, op_count: int | None = None, insert_base: int | None = None) -> None:
        self.spec = spec
        n = spec.op_count if op_count is None else op_count
        self.n = n
        rng = np.random.default_rng([spec.seed, 1])
        if spec.name == "LoadA" or (spec.insert == 1.0):
            self.tags = np.full(n, OpType.INSERT.tag, dtype=np.uint8)
            base = 0 if insert_base is None else insert_base
            self.index = np.arange(base, base + n, dtype=np.int64)
        else:
            u = rng.random(n)
            tags = np.where(u < spec.read, 0, np.where(u < spec.read + spec.update, 1, 2)).astype(np.uint8)
            self.tags = tags
            self.index = self._draw_keys(rng, tags, insert_base)
        self._chunks: dict[int, bytes] = {}

    def _draw_keys(self, rng: np.random.Generator, tags: np.ndarray, insert_base: int | None) -> np.ndarray:
        spec = self.spec
        n = len(tags)
        kc = spec.key_count
        inserts = tags == 2
        ins_rank = np.cumsum(inserts) - inserts  # inserts before each request
        base = kc if insert_base is None else insert_base
        idx = np.empty(n, dtype=np.int64)
        idx[inserts] = base + ins_rank[inserts]
        others = ~inserts
        m = int(others.sum())
        if spec.key_dist == KeyDist.UNIFORM:
            draws = rng.integers(0, kc, m)
        elif spec.key_dist == KeyDist.ZIPFIAN:
            draws = zipfian_next(ZipfianState(kc, spec.zipf_theta), rng, m)
        elif spec.key_dist == KeyDist.PARETO:
            draws = pareto_next(rng, kc, spec.pareto_shape, spec.pareto_scale, m)
        else:  # latest: Zipfian over recency, newest insert is rank 0
            ranks = ZipfianState(kc, spec.zipf_theta).ranks(rng.random(m))
            newest = base + ins_rank[others] - 1
            draws = np.maximum(newest - ranks, 0)
        idx[others] = draws
        return idx

    def _value(self, i: int) -> bytes:
        vs = self.spec.value_size
        c, off = divmod(i, self.CHUNK)
        buf = self._chunks.get(c)
        if buf is None:
            if len(self._chunks) > 8:
                self._chunks.clear()
            buf = np.random.default_rng([self.spec.seed, 2, c]).bytes(vs * self.CHUNK)
            self._chunks[c] = buf
        return buf[off * vs : (off + 1) * vs]

    def op(self, i: int) -> OpType:
        return OP_BY_TAG[int(self.tags[i])]

    def request(self, i: int, issue_ns: int = 0) -> Request:
        op = self.op(i)
        key = key_for(int(self.index[i]), self.spec.key_size)
        value = self._value(i) if op != OpType.READ else b""
        return Request(op, key, value, issue_ns, i)

    def __len__(self) -> int:
        return self.n


# -- harness ---------------------------------------------------------------------


@dataclass
class LatencyReport:
    """Raw outcome of one open-loop run; summarised by :mod:`lsmkv.metrics`."""

    workload: str
    rate: float
    start_ns: int
    end_ns: int
    op_tags: np.ndarray
    issue_ns: np.ndarray
    latency_ns: np.ndarray
    stalls: list[tuple[int, int]] = field(default_factory=list)
    device: DeviceStats = field(default_factory=DeviceStats)
    user_bytes: int = 0
    cpu_ns: int = 0
    chains: list = field(default_factory=list)
    rate_unachievable: bool = False
    warmup_fraction: float = 0.1
    extra: dict = field(default_factory=dict)

    @property
    def count(self) -> int:
        return int(len(self.latency_ns))

    @property
    def completion_ns(self) -> np.ndarray:
        return self.issue_ns + self.latency_ns

    def latencies(self, op: OpType | None = None, skip_warmup: bool = True) -> np.ndarray:
        lat, tags = self.latency_ns, self.op_tags
        if skip_warmup and self.warmup_fraction:
            cut = int(len(lat) * self.warmup_fraction)
            lat, tags = lat[cut:], tags[cut:]
        return lat if op is None else lat[tags == op.tag]

    def bit_identical(self, other: "LatencyReport") -> bool:
        return (
            np.array_equal(self.op_tags, other.op_tags)
            and np.array_equal(self.issue_ns, other.issue_ns)
            and np.array_equal(self.latency_ns, other.latency_ns)
            and self.stalls == other.stalls
            and self.device == other.device
            and (self.start_ns, self.end_ns, self.user_bytes) == (other.start_ns, other.end_ns, other.user_bytes)
        )


def run_open_loop(
    engine: Any,
    spec: WorkloadSpec,
    *,
    rate: float | None = None,
    op_count: int | None = None,
    stream: RequestStream | None = None,
    on_start: Callable[[int], None] | None = None,
) -> LatencyReport:
    """Drive ``engine`` at a fixed request rate and record end-to-end latency.

    ``engine`` needs a ``sim`` attribute (the simulator whose clock times the
    run) and an ``execute(request)`` generator; device/stall/chain counters
    are captured when the engine exposes them.
    """
    rate = float(spec.rate if rate is None else rate)
    stream = stream or RequestStream(spec, op_count)
    n = len(stream)
    rate_unachievable = rate > GENERATOR_MAX_RATE
    if rate_unachievable:
        warnings.warn(RateUnachievable(f"rate {rate:.0f}/s exceeds the generator cap {GENERATOR_MAX_RATE:.0f}/s"), stacklevel=2)
    sim = engine.sim
    t0 = sim.now
    if on_start is not None:
        on_start(t0)
    issue = t0 + (np.arange(n, dtype=np.float64) * (NS_PER_S / rate)).astype(np.int64)
    latency = np.zeros(n, dtype=np.int64)
    dev = getattr(engine, "device", None)
    dev0 = dev.stats.copy() if dev is not None else DeviceStats()
    stats = getattr(engine, "stats", None)
    user0 = getattr(stats, "user_bytes", 0)
    chains0 = len(getattr(engine, "chains", []))
    cpu0 = time.process_time_ns()
    state = {"next": 0, "done": 0}
    issue_list = issue.tolist()

    def client():
        while state["next"] < n:
            i = state["next"]
            state["next"] = i + 1
            t_issue = issue_list[i]
            if t_issue > sim.now:
                yield t_issue
            req = stream.request(i, t_issue)
            yield from engine.execute(req)
            latency[i] = sim.now - t_issue
            state["done"] += 1

    for w in range(spec.client_threads):
        sim.spawn(client(), f"client-{w}")
    sim.run_until(lambda: state["done"] >= n)
    t_end = sim.now
    cpu = time.process_time_ns() - cpu0

    stalls: list[tuple[int, int]] = []
    log = getattr(engine, "stalls", None)
    if log is not None:
        stalls = log.between(t0, t_end)
    report = LatencyReport(
        workload=spec.name,
        rate=rate,
        start_ns=t0,
        end_ns=t_end,
        op_tags=stream.tags.copy(),
        issue_ns=issue,
        latency_ns=latency,
        stalls=stalls,
        device=(dev.stats - dev0) if dev is not None else DeviceStats(),
        user_bytes=getattr(stats, "user_bytes", 0) - user0,
        cpu_ns=cpu,
        chains=list(getattr(engine, "chains", [])[chains0:]),
        rate_unachievable=rate_unachievable,
        warmup_fraction=spec.warmup_fraction,
    )
    return report


def completion_rate(report: LatencyReport, tail_fraction: float = 0.5) -> float:
    """Completions per second over the final ``tail_fraction`` of the run's duration."""
    done = np.sort(report.completion_ns)
    span = report.end_ns - report.start_ns
    if span <= 0 or not len(done):
        return 0.0
    t_from = report.end_ns - span * tail_fraction
    count = len(done) - int(np.searchsorted(done, t_from, side="left"))
    return count * NS_PER_S / (span * tail_fraction)


def profile_sustainable_throughput(
    engine: Any,
    spec: WorkloadSpec,
    *,
    rate: float = GENERATOR_MAX_RATE,
    op_count: int | None = None,
) -> float:
    """Completion rate over the final half of a run offered at a very high rate."""
    report = run_open_loop(engine, spec, rate=rate, op_count=op_count)
    return completion_rate(report, 0.5)


class StubEngine:
    """Engine stand-in with a fixed (or per-request) service time, for harness tests."""

    def __init__(self, service_ns: int | Callable[[Request], int] = 0, sim=None) -> None:
        from .sim import Simulator

        self.sim = sim or Simulator()
        self.service_ns = service_ns
        self.frozen_until = 0
        self.served = 0

    def freeze(self, duration_ns: int, at_ns: int | None = None) -> None:
        start = self.sim.now if at_ns is None else at_ns
        self.frozen_until = max(self.frozen_until, start + duration_ns)
        self._freeze_start = start

    def execute(self, request: Request):
        start = getattr(self, "_freeze_start", None)
        if start is not None and start <= self.sim.now < self.frozen_until:
            yield self.frozen_until
        svc = self.service_ns(request) if callable(self.service_ns) else self.service_ns
        if svc:
            yield self.sim.now + svc
        self.served += 1
