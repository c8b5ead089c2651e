"""Engine configuration and per-level sizing."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from enum import Enum

from .errors import ConfigError

KiB = 1 << 10
MiB = 1 << 20


class Policy(str, Enum):
    TIERED_L0 = "tiered_l0"
    TIERED_L0_DEBT = "tiered_l0_debt"
    LSMI = "lsmi"
    VLSM = "vlsm"

    @property
    def tiered(self) -> bool:
        return self in (Policy.TIERED_L0, Policy.TIERED_L0_DEBT)


@dataclass(frozen=True)
class EngineConfig:
    policy: Policy = Policy.VLSM
    sst_size: int = 256 * KiB  # S_M
    vsst_min: int | None = None  # S_m; defaults to sst_size // growth_factor
    growth_factor: int = 8
    phi: int = 32  # L1 -> L2 growth factor, vLSM only
    memtable_size: int | None = None  # defaults to sst_size
    num_memtables: int = 2
    l0_max_ssts: int = 4
    max_levels: int = 5
    debt_limit: int | None = None  # per-level excess allowed under TIERED_L0_DEBT
    background_workers: int = 4
    deterministic: bool = True
    regions: int = 1
    region_key_prefix: bytes = b"user"
    block_size: int = 4096
    bloom_bits_per_key: int = 10
    # pins L1's byte target regardless of policy sizing (misconfiguration studies)
    l1_target_override: int | None = None
    put_cpu_ns: int = 4_000
    get_cpu_ns: int = 2_000
    seed: int = 0
    victim_sample: int = 50
    manifest_checkpoints: bool = True
    table_cache: bool = True
    verify_invariants: bool = False
    auto_compact: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "policy", Policy(self.policy))
        if isinstance(self.region_key_prefix, str):
            object.__setattr__(self, "region_key_prefix", self.region_key_prefix.encode())
        if self.growth_factor < 2:
            raise ConfigError("growth_factor must be >= 2")
        if self.sst_size <= 0 or self.s_min <= 0 or self.s_min > self.sst_size:
            raise ConfigError("need 0 < vsst_min <= sst_size")
        if self.policy == Policy.VLSM and self.phi < self.growth_factor:
            raise ConfigError("phi must be >= growth_factor under vLSM")
        if self.num_memtables < 2:
            raise ConfigError("num_memtables must be >= 2 (one active, one immutable)")
        if self.l0_max_ssts < 1 or self.max_levels < 2 or self.background_workers < 1:
            raise ConfigError("l0_max_ssts, max_levels and background_workers must be positive")
        if self.regions < 1:
            raise ConfigError("regions must be >= 1")

    @property
    def s_max(self) -> int:
        return self.sst_size

    @property
    def s_min(self) -> int:
        return self.vsst_min if self.vsst_min is not None else self.sst_size // self.growth_factor

    @property
    def memtable_bytes(self) -> int:
        return self.memtable_size if self.memtable_size is not None else self.sst_size

    @property
    def debt_bytes(self) -> int:
        if self.policy != Policy.TIERED_L0_DEBT:
            return 0
        return self.debt_limit if self.debt_limit is not None else self.l0_max_ssts * self.memtable_bytes

    def level_targets(self) -> list[float]:
        """Byte target per level; index 0 is unused, the last level is unbounded."""
        f = self.growth_factor
        if self.policy.tiered:
            l1 = self.l0_max_ssts * self.memtable_bytes
        else:
            l1 = f * self.sst_size
        if self.l1_target_override is not None:
            l1 = self.l1_target_override
        targets: list[float] = [0.0, float(l1)]
        for k in range(2, self.max_levels):
            mult = self.phi if (k == 2 and self.policy == Policy.VLSM) else f
            targets.append(targets[-1] * mult)
        targets[-1] = float("inf")
        return targets

    def with_(self, **changes) -> "EngineConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, Enum):
                v = v.value
            elif isinstance(v, bytes):
                v = v.decode("latin-1")
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown engine fields: {sorted(unknown)}")
        d = dict(d)
        if isinstance(d.get("region_key_prefix"), str):
            d["region_key_prefix"] = d["region_key_prefix"].encode("latin-1")
        return cls(**d)
