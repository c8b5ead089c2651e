"""Object storage with exact byte accounting and a cost model.

A :class:`Device` couples a storage backend (memory or one file per object)
with a timing mode.  In simulated mode every operation occupies a single
FIFO service queue for ``per_op_latency + size / bandwidth`` of virtual time;
in wall mode the operation simply takes as long as it takes.
"""

from __future__ import annotations

import os
import threading
import time
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

from .errors import CapacityExceeded, IoError, OutOfBounds, UnknownObject

MiB = 1 << 20
NS_PER_S = 1_000_000_000


@dataclass
class DeviceStats:
    bytes_written: int = 0
    bytes_read: int = 0
    write_ops: int = 0
    read_ops: int = 0

    def copy(self) -> "DeviceStats":
        return DeviceStats(**asdict(self))

    def __sub__(self, other: "DeviceStats") -> "DeviceStats":
        return DeviceStats(
            self.bytes_written - other.bytes_written,
            self.bytes_read - other.bytes_read,
            self.write_ops - other.write_ops,
            self.read_ops - other.read_ops,
        )


class DeviceMode(str, Enum):
    SIMULATED = "simulated"
    FILE = "file"


@dataclass(frozen=True)
class DeviceModel:
    bandwidth: int = 500 * MiB  # bytes per second
    per_op_latency_ns: int = 100_000
    mode: DeviceMode = DeviceMode.SIMULATED
    capacity: int | None = None

    def cost_ns(self, nbytes: int) -> int:
        return self.per_op_latency_ns + nbytes * NS_PER_S // self.bandwidth


class VirtualClock:
    """Monotone nanosecond counter."""

    def __init__(self, start_ns: int = 0) -> None:
        self._now = start_ns

    @property
    def now(self) -> int:
        return self._now

    def advance(self, delta_ns: int) -> int:
        if delta_ns < 0:
            raise ValueError("clock cannot move backwards")
        self._now += delta_ns
        return self._now

    def advance_to(self, t_ns: int) -> int:
        if t_ns > self._now:
            self._now = t_ns
        return self._now


class WallClock:
    """Monotonic wall clock with the same interface as :class:`VirtualClock`."""

    def __init__(self) -> None:
        self._origin = time.monotonic_ns()

    @property
    def now(self) -> int:
        return time.monotonic_ns() - self._origin

    def advance(self, delta_ns: int) -> int:
        return self.now

    def advance_to(self, t_ns: int) -> int:
        return self.now


# -- storage backends --------------------------------------------------------


class MemoryStorage:
    def __init__(self) -> None:
        self._objects: dict[int, bytes] = {}

    def put(self, oid: int, payload: bytes) -> None:
        self._objects[oid] = payload

    def get(self, oid: int) -> bytes:
        try:
            return self._objects[oid]
        except KeyError:
            raise UnknownObject(oid) from None

    def read(self, oid: int, offset: int, length: int) -> bytes:
        return self.get(oid)[offset : offset + length]

    def size(self, oid: int) -> int:
        return len(self.get(oid))

    def delete(self, oid: int) -> None:
        try:
            del self._objects[oid]
        except KeyError:
            raise UnknownObject(oid) from None

    def ids(self) -> list[int]:
        return sorted(self._objects)


class FileStorage:
    """One file per object, named by the zero-padded decimal object id."""

    def __init__(self, root: str | os.PathLike) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, oid: int) -> Path:
        return self.root / f"{oid:020d}"

    def put(self, oid: int, payload: bytes) -> None:
        tmp = self.root / f".{oid:020d}.tmp"
        try:
            with open(tmp, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, self._path(oid))
        except OSError as exc:
            raise IoError(str(exc)) from exc

    def read(self, oid: int, offset: int, length: int) -> bytes:
        try:
            with open(self._path(oid), "rb") as fh:
                fh.seek(offset)
                return fh.read(length)
        except FileNotFoundError:
            raise UnknownObject(oid) from None
        except OSError as exc:
            raise IoError(str(exc)) from exc

    def get(self, oid: int) -> bytes:
        return self.read(oid, 0, self.size(oid))

    def size(self, oid: int) -> int:
        try:
            return self._path(oid).stat().st_size
        except FileNotFoundError:
            raise UnknownObject(oid) from None

    def delete(self, oid: int) -> None:
        try:
            self._path(oid).unlink()
        except FileNotFoundError:
            raise UnknownObject(oid) from None

    def ids(self) -> list[int]:
        return sorted(int(p.name) for p in self.root.iterdir() if p.name.isdigit())


# -- device ------------------------------------------------------------------


class Device:
    """Storage + accounting + cost model.

    ``write_object``/``read_object`` perform the data transfer immediately.
    With ``wait=True`` (the default) the caller's clock is advanced to the
    completion time; simulation processes pass ``wait=False`` and sleep
    until :attr:`last_done` themselves so that other activity interleaves.
    """

    def __init__(
        self,
        model: DeviceModel | None = None,
        storage: MemoryStorage | FileStorage | None = None,
        clock: VirtualClock | WallClock | None = None,
    ) -> None:
        self.model = model or DeviceModel()
        self.storage = storage if storage is not None else MemoryStorage()
        if clock is None:
            clock = VirtualClock() if self.model.mode == DeviceMode.SIMULATED else WallClock()
        self.clock = clock
        self.stats = DeviceStats()
        self.busy_until = 0
        self.last_done = 0
        self._lock = threading.Lock()
        existing = self.storage.ids()
        self._next_id = (max(existing) + 1) if existing else 1
        self._used = sum(self.storage.size(i) for i in existing) if self.model.capacity else 0

    @property
    def simulated(self) -> bool:
        return self.model.mode == DeviceMode.SIMULATED

    def _charge(self, nbytes: int, wait: bool) -> int:
        now = self.clock.now
        if self.simulated:
            start = max(now, self.busy_until)
            done = start + self.model.cost_ns(nbytes)
            self.busy_until = done
        else:
            done = now
        self.last_done = done
        if wait:
            self.clock.advance_to(done)
        return done

    def reserve_id(self) -> int:
        with self._lock:
            oid = self._next_id
            self._next_id += 1
            return oid

    def write_object(self, payload: bytes, *, wait: bool = True, oid: int | None = None) -> int:
        if not payload:
            raise ValueError("payload must be non-empty")
        with self._lock:
            cap = self.model.capacity
            if cap is not None and self._used + len(payload) > cap:
                raise CapacityExceeded(f"{self._used + len(payload)} > {cap}")
            if oid is None:
                oid = self._next_id
                self._next_id += 1
            self.storage.put(oid, payload)
            self._used += len(payload)
            self.stats.bytes_written += len(payload)
            self.stats.write_ops += 1
            self._charge(len(payload), wait)
        return oid

    def read_object(self, oid: int, offset: int = 0, length: int | None = None, *, wait: bool = True) -> bytes:
        with self._lock:
            size = self.storage.size(oid)
            if length is None:
                length = size - offset
            if offset < 0 or length < 0 or offset + length > size:
                raise OutOfBounds(f"object {oid}: [{offset}, {offset + length}) outside size {size}")
            data = self.storage.read(oid, offset, length)
            self.stats.bytes_read += length
            self.stats.read_ops += 1
            self._charge(length, wait)
        return data

    def delete_object(self, oid: int) -> None:
        with self._lock:
            size = self.storage.size(oid)
            self.storage.delete(oid)
            self._used -= size

    def object_size(self, oid: int) -> int:
        return self.storage.size(oid)

    def live_objects(self) -> list[int]:
        return self.storage.ids()
