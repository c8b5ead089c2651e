"""A small cooperative process kernel.

Processes are generators.  They yield one of:

* an ``int``: resume at that absolute time (ns); past times resume at once,
* a :class:`Signal`: resume the next time the signal fires,
* a :class:`Process`: resume when that process finishes.

In virtual mode time jumps from event to event.  In wall mode the kernel
sleeps until an event is due, which turns the same processes into a
real-time (cooperative, single-threaded) execution.
"""

from __future__ import annotations

import heapq
import threading
import time
from collections import deque
from typing import Any, Callable, Generator

from .device import VirtualClock, WallClock
from .errors import Deadlock

ProcGen = Generator[Any, Any, Any]


class Signal:
    __slots__ = ("_waiters",)

    def __init__(self) -> None:
        self._waiters: list[Process] = []

    def fire(self) -> None:
        if not self._waiters:
            return
        waiters, self._waiters = self._waiters, []
        for proc in waiters:
            proc.sim._ready(proc)


class Process:
    __slots__ = ("sim", "gen", "done", "value", "error", "_joiners", "name", "_joined")

    def __init__(self, sim: "Simulator", gen: ProcGen, name: str = "") -> None:
        self.sim = sim
        self.gen = gen
        self.done = False
        self.value: Any = None
        self.error: BaseException | None = None
        self._joiners: list[Process] = []
        self.name = name
        self._joined: Process | None = None


class Mutex:
    """FIFO mutex for processes; use ``yield from mutex.acquire()``."""

    def __init__(self) -> None:
        self.held = False
        self._waiters: deque[Signal] = deque()

    def acquire(self) -> ProcGen:
        if not self.held:
            self.held = True
            return
        sig = Signal()
        self._waiters.append(sig)
        yield sig  # ownership is handed over by release()

    def release(self) -> None:
        if self._waiters:
            self._waiters.popleft().fire()
        else:
            self.held = False

    @property
    def queued(self) -> int:
        return len(self._waiters)


class Simulator:
    def __init__(self, clock: VirtualClock | WallClock | None = None) -> None:
        self.clock = clock if clock is not None else VirtualClock()
        self.realtime = isinstance(self.clock, WallClock)
        self._heap: list[tuple[int, int, Process]] = []
        self._counter = 0
        self._lock = threading.RLock()

    @property
    def now(self) -> int:
        return self.clock.now

    # -- scheduling --------------------------------------------------------

    def _push(self, at: int, proc: Process) -> None:
        self._counter += 1
        heapq.heappush(self._heap, (at, self._counter, proc))

    def _ready(self, proc: Process) -> None:
        self._push(self.clock.now, proc)

    def spawn(self, gen: ProcGen, name: str = "") -> Process:
        proc = Process(self, gen, name)
        self._ready(proc)
        return proc

    def _step(self, proc: Process) -> None:
        gen = proc.gen
        now = self.clock.now
        send: Any = None
        joined, proc._joined = proc._joined, None
        try:
            if joined is not None and joined.error is not None:
                cmd = gen.throw(joined.error)
            else:
                cmd = gen.send(joined.value if joined is not None else None)
            while True:
                if type(cmd) is int:
                    if cmd > now:
                        self._push(cmd, proc)
                        return
                elif isinstance(cmd, Signal):
                    cmd._waiters.append(proc)
                    return
                elif isinstance(cmd, Process):
                    if not cmd.done:
                        proc._joined = cmd
                        cmd._joiners.append(proc)
                        return
                    if cmd.error is not None:
                        cmd = gen.throw(cmd.error)
                        continue
                    send = cmd.value
                elif cmd is not None:
                    raise TypeError(f"process yielded unsupported {cmd!r}")
                cmd = gen.send(send)
                send = None
        except StopIteration as stop:
            proc.value = stop.value
            self._finish(proc)
        except BaseException as exc:  # noqa: BLE001 - handed to joiners or the driver
            proc.error = exc
            had_joiners = bool(proc._joiners)
            self._finish(proc)
            if not had_joiners:
                raise

    def _finish(self, proc: Process) -> None:
        proc.done = True
        for j in proc._joiners:
            self._ready(j)
        proc._joiners.clear()

    def _pop_and_run(self) -> None:
        at, _, proc = heapq.heappop(self._heap)
        if self.realtime:
            delay = at - self.clock.now
            if delay > 0:
                time.sleep(delay / 1e9)
        else:
            self.clock.advance_to(at)
        if not proc.done:
            self._step(proc)

    # -- driving -----------------------------------------------------------

    def run_until(self, cond: Callable[[], bool], limit_ns: int | None = None) -> bool:
        """Run events until ``cond()`` holds; returns False on time limit."""
        with self._lock:
            while not cond():
                if not self._heap:
                    raise Deadlock("no runnable events while waiting")
                if limit_ns is not None and self._heap[0][0] > limit_ns:
                    self.clock.advance_to(limit_ns)
                    return False
                self._pop_and_run()
            return True

    def run_until_time(self, t_ns: int) -> None:
        with self._lock:
            while self._heap and self._heap[0][0] <= t_ns:
                self._pop_and_run()
            self.clock.advance_to(t_ns)

    def run(self) -> None:
        """Run until no events remain."""
        with self._lock:
            while self._heap:
                self._pop_and_run()

    def drive(self, gen: ProcGen, name: str = "") -> Any:
        """Run ``gen`` to completion (other processes interleave) and return its value."""
        proc = self.spawn(gen, name)
        self.run_until(lambda: proc.done)
        if proc.error is not None:
            raise proc.error
        return proc.value

    @property
    def pending(self) -> int:
        return len(self._heap)
