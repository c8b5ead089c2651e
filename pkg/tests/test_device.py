import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from lsmkv.device import Device, DeviceMode, DeviceModel, FileStorage, MemoryStorage, MiB, VirtualClock
from lsmkv.errors import CapacityExceeded, OutOfBounds, UnknownObject

# 1 byte per microsecond plus 100 us per op: costs are easy to add by hand
LEDGER_MODEL = DeviceModel(bandwidth=1_000_000, per_op_latency_ns=100_000)

# (op, args); read/delete refer to the n-th written object
SCRIPT = (
    [("w", 1000 * (i % 5 + 1)) for i in range(20)]
    + [("r", i, (i * 7) % 100, 50 + 10 * i) for i in range(15)]
    + [("d", 3 * i) for i in range(5)]
    + [("w", 512) if i % 2 == 0 else ("r", 19, 0, 1000) for i in range(10)]
)
# hand ledger: writes 4 x (1+2+3+4+5) kB + 5 x 512; reads 50..190 step 10 plus 5 x 1000;
# clock = 45 charged ops x 100 us + 69360 bytes x 1 us
LEDGER = dict(bytes_written=62_560, bytes_read=6_800, write_ops=25, read_ops=20, clock_ns=73_860_000)


def test_scripted_fifty_op_ledger():
    assert len(SCRIPT) == 50
    dev = Device(LEDGER_MODEL)
    ids = []
    for op in SCRIPT:
        if op[0] == "w":
            ids.append(dev.write_object(bytes(op[1])))
        elif op[0] == "r":
            assert len(dev.read_object(ids[op[1]], op[2], op[3])) == op[3]
        else:
            dev.delete_object(ids[op[1]])
    s = dev.stats
    assert (s.bytes_written, s.bytes_read, s.write_ops, s.read_ops) == (
        LEDGER["bytes_written"], LEDGER["bytes_read"], LEDGER["write_ops"], LEDGER["read_ops"],
    )
    assert dev.clock.now == LEDGER["clock_ns"]
    assert len(dev.live_objects()) == 25 - 5


def test_write_cost_model_example():
    dev = Device(DeviceModel(bandwidth=100 * MiB, per_op_latency_ns=100_000))
    dev.write_object(bytes(MiB))
    assert dev.clock.now == 10_100_000


def test_two_small_writes_counted():
    dev = Device()
    dev.write_object(bytes(1024))
    dev.write_object(bytes(1024))
    assert dev.stats.bytes_written == 2048


def test_read_back_and_bounds():
    dev = Device()
    oid = dev.write_object(b"hello world")
    assert dev.read_object(oid) == b"hello world"
    assert dev.read_object(oid, 6, 5) == b"world"
    with pytest.raises(OutOfBounds):
        dev.read_object(oid, 12, 1)
    with pytest.raises(UnknownObject):
        dev.read_object(oid + 99)


def test_delete_then_read_fails_and_is_free():
    dev = Device()
    oid = dev.write_object(b"x" * 10)
    before = dev.stats.copy()
    dev.delete_object(oid)
    assert dev.stats == before
    with pytest.raises(UnknownObject):
        dev.read_object(oid)
    with pytest.raises(UnknownObject):
        dev.delete_object(oid)


def test_capacity_is_reclaimed_by_delete():
    dev = Device(DeviceModel(capacity=100))
    oid = dev.write_object(bytes(80))
    with pytest.raises(CapacityExceeded):
        dev.write_object(bytes(30))
    dev.delete_object(oid)
    dev.write_object(bytes(30))


def test_empty_payload_rejected():
    with pytest.raises(ValueError):
        Device().write_object(b"")


def test_no_wait_charges_queue_not_clock():
    dev = Device(LEDGER_MODEL)
    dev.write_object(bytes(100), wait=False)
    dev.write_object(bytes(100), wait=False)
    assert dev.clock.now == 0
    assert dev.last_done == dev.busy_until == 2 * (100_000 + 100_000)


@pytest.mark.parametrize("backend", ["memory", "file"])
def test_random_read_fuzz_against_shadow_copy(backend, tmp_path):
    storage = MemoryStorage() if backend == "memory" else FileStorage(tmp_path)
    dev = Device(storage=storage)
    rng = random.Random(1)
    shadow = {}
    for _ in range(30):
        data = rng.randbytes(rng.randint(1, 4000))
        shadow[dev.write_object(data)] = data
    for _ in range(500):
        oid = rng.choice(list(shadow))
        data = shadow[oid]
        off = rng.randrange(len(data))
        ln = rng.randint(0, len(data) - off)
        assert dev.read_object(oid, off, ln) == data[off : off + ln]


@given(st.lists(st.tuples(st.booleans(), st.integers(1, 64)), max_size=80))
def test_create_delete_fuzz_matches_shadow_set(ops):
    dev = Device()
    live = []
    for create, n in ops:
        if create or not live:
            live.append(dev.write_object(bytes(n)))
        else:
            dev.delete_object(live.pop(n % len(live)))
    assert dev.live_objects() == sorted(live)


def test_file_backend_names_and_reopen(tmp_path):
    dev = Device(storage=FileStorage(tmp_path))
    oid = dev.write_object(b"abc")
    assert (tmp_path / f"{oid:020d}").read_bytes() == b"abc"
    again = Device(storage=FileStorage(tmp_path))
    assert again.read_object(oid) == b"abc"
    assert again.reserve_id() > oid


def test_simulated_runs_are_bit_identical():
    def run():
        dev = Device(LEDGER_MODEL)
        rng = random.Random(5)
        for _ in range(100):
            oid = dev.write_object(rng.randbytes(rng.randint(1, 500)), wait=rng.random() < 0.5)
            dev.read_object(oid, 0, 1)
        return dev.clock.now, dev.busy_until, dev.stats

    assert run() == run()


def test_virtual_clock_monotone():
    c = VirtualClock()
    c.advance(5)
    c.advance_to(3)
    assert c.now == 5
    with pytest.raises(ValueError):
        c.advance(-1)


def test_file_mode_uses_wall_clock():
    dev = Device(DeviceModel(mode=DeviceMode.FILE))
    assert not dev.simulated
    dev.write_object(b"x")
    assert dev.stats.bytes_written == 1
