"""Embedded LSM-tree key-value engine with pluggable compaction policies."""

from .config import EngineConfig, Policy
from .core import Entry, KeyRange, Op, compare_entries, ranges_intersect
from .device import Device, DeviceMode, DeviceModel, DeviceStats, FileStorage, MemoryStorage, VirtualClock
from .engine import Engine, StallCause, StallLog, open_engine

__version__ = "0.1.0"
