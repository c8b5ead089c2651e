"""Randomised model check: engine against an in-memory dict."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .config import EngineConfig
from .engine import Engine
from .workload import key_for


@dataclass
class FuzzResult:
    seed: int
    ops: int
    gets_checked: int = 0
    mismatches: int = 0
    first_failure: int | None = None  # op index; replaying ops[: first_failure + 1] reproduces it
    detail: str = ""
    invariant_problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.mismatches == 0 and not self.invariant_problems


def fuzz_ops(seed: int, ops: int, key_space: int, value_size: int = 176):
    """Yield ``(kind, key, value)`` with kind in ``put``/``delete``/``get``."""
    rng = random.Random(seed)
    for _ in range(ops):
        u = rng.random()
        key = key_for(rng.randrange(key_space))
        if u < 0.5:
            n = rng.randint(1, 2 * value_size)
            yield "put", key, rng.randbytes(n)
        elif u < 0.65:
            yield "delete", key, b""
        else:
            yield "get", key, b""


def run_fuzz(
    config: EngineConfig,
    seed: int,
    ops: int,
    key_space: int = 100_000,
    *,
    final_scan: bool = True,
    stop_on_failure: bool = True,
) -> FuzzResult:
    """Apply ``ops`` random operations to a fresh engine and a dict; compare every get.

    After the stream, optionally flushes everything and compares every key
    in the key space, then scans the level invariants.
    """
    engine = Engine(config.with_(seed=seed))
    model: dict[bytes, bytes] = {}
    res = FuzzResult(seed=seed, ops=ops)
    for i, (kind, key, value) in enumerate(fuzz_ops(seed, ops, key_space)):
        if kind == "put":
            engine.put(key, value)
            model[key] = value
        elif kind == "delete":
            engine.delete(key)
            model.pop(key, None)
        else:
            got = engine.get(key)
            res.gets_checked += 1
            if got != model.get(key):
                res.mismatches += 1
                if res.first_failure is None:
                    res.first_failure = i
                    res.detail = f"op {i}: get({key!r}) returned {_short(got)}, expected {_short(model.get(key))}"
                if stop_on_failure:
                    return res
    if final_scan:
        engine.flush_all()
        for k in range(key_space):
            key = key_for(k)
            got = engine.get(key)
            res.gets_checked += 1
            if got != model.get(key):
                res.mismatches += 1
                if res.first_failure is None:
                    res.first_failure = ops
                    res.detail = f"final scan: get({key!r}) returned {_short(got)}, expected {_short(model.get(key))}"
                if stop_on_failure:
                    break
        res.invariant_problems = engine.check_invariants()
    return res


def _short(v: bytes | None) -> str:
    if v is None:
        return "None"
    return f"<{len(v)} bytes {v[:8].hex()}...>"
