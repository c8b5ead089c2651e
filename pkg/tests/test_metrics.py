import json
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lsmkv.config import EngineConfig, KiB, Policy
from lsmkv.device import DeviceStats
from lsmkv.engine import Engine
from lsmkv.errors import EmptyHistogram
from lsmkv.metrics import (
    CSV_COLUMNS,
    LatencyRecorder,
    Report,
    build_report,
    chain_stats,
    cpu_per_op,
    dump_latencies,
    exact_percentile,
    export_report,
    io_amplification,
    load_latencies,
    throughput_timeseries,
    timeseries_csv,
)
from lsmkv.workload import NS_PER_S, StubEngine, WorkloadSpec, run_open_loop

GOLDEN = Path(__file__).parent / "golden" / "report_runA_vlsm.json"


def recorder(values, digits=3):
    rec = LatencyRecorder(digits)
    rec.record_many(np.asarray(values, dtype=np.int64))
    return rec


# -- histogram ----------------------------------------------------------------------


def test_single_sample_every_percentile():
    rec = recorder([123_456])
    for p in (1, 50, 99, 100):
        assert rec.percentile(p) == 123_456


def test_one_to_hundred():
    rec = recorder(range(1, 101))
    assert rec.percentile(99) == 99
    assert rec.percentile(50) == 50
    assert rec.percentile(100) == 100


def test_empty_histogram_raises():
    with pytest.raises(EmptyHistogram):
        LatencyRecorder().percentile(99)
    with pytest.raises(ValueError):
        recorder([1]).percentile(0)


@pytest.mark.parametrize("dist", ["lognormal", "exponential", "uniform"])
def test_p99_close_to_exact(dist):
    rng = np.random.default_rng(7)
    draw = {
        "lognormal": lambda: rng.lognormal(12, 1.5, 10_000),
        "exponential": lambda: rng.exponential(2e6, 10_000),
        "uniform": lambda: rng.uniform(1, 5e9, 10_000),
    }[dist]
    values = np.maximum(draw().astype(np.int64), 1)
    rec = recorder(values)
    for p in (50, 90, 99, 99.9):
        exact = exact_percentile(values, p)
        assert abs(rec.percentile(p) - exact) <= 0.001 * exact


@settings(max_examples=60)
@given(st.lists(st.integers(1, 10**12), min_size=1, max_size=300), st.floats(0.1, 100))
def test_percentile_relative_error_bound(values, p):
    exact = exact_percentile(values, p)
    assert abs(recorder(values).percentile(p) - exact) <= 0.001 * exact


@settings(max_examples=40)
@given(*(st.lists(st.integers(1, 10**10), max_size=80) for _ in range(3)))
def test_merge_is_associative_and_matches_concat(a, b, c):
    ab_c = recorder(a).merge(recorder(b)).merge(recorder(c))
    a_bc = recorder(a).merge(recorder(b).merge(recorder(c)))
    whole = recorder(a + b + c)
    assert np.array_equal(ab_c.counts, a_bc.counts)
    assert np.array_equal(ab_c.counts, whole.counts)
    assert ab_c.count == len(a + b + c)


def test_merge_rejects_different_layout():
    with pytest.raises(ValueError):
        LatencyRecorder(3).merge(LatencyRecorder(2))


# -- scalar metrics ------------------------------------------------------------------


@pytest.mark.parametrize(
    "written, read, user, expected",
    [(1000, 500, 100, (10.0, 5.0, 15.0)), (0, 0, 7, (0.0, 0.0, 0.0)), (300, 0, 300, (1.0, 0.0, 1.0))],
)
def test_io_amplification_examples(written, read, user, expected):
    assert io_amplification(DeviceStats(bytes_written=written, bytes_read=read), user) == expected


def test_io_amplification_needs_user_bytes():
    with pytest.raises(ValueError):
        io_amplification(DeviceStats(), 0)


def test_cpu_per_op_examples():
    assert cpu_per_op(1000, 10) == 100
    with pytest.raises(ValueError):
        cpu_per_op(5, 0)


def test_cpu_per_op_tracks_busy_spin():
    spin_ns = 1_000_000

    def busy(req):
        end = time.process_time_ns() + spin_ns
        while time.process_time_ns() < end:
            pass
        return 0

    spec = WorkloadSpec.preset("RunA", key_count=100, op_count=300, rate=1000.0, warmup_fraction=0.0)
    rep = build_report(run_open_loop(StubEngine(busy), spec))
    assert rep.cpu_per_op_ns == pytest.approx(spin_ns, rel=0.2)


def test_throughput_timeseries_bins():
    done = np.array([0, 10, NS_PER_S + 5, 2 * NS_PER_S + 1, 2 * NS_PER_S + 2, 3 * NS_PER_S - 1])
    assert throughput_timeseries(done, 0, 3 * NS_PER_S) == [(0.0, 2.0), (1.0, 1.0), (2.0, 3.0)]
    assert throughput_timeseries(done, 5, 5) == []
    half = throughput_timeseries(done, 0, NS_PER_S, bin_ns=NS_PER_S // 2)
    assert half[0] == (0.0, 4.0)


def test_chain_stats_of_nothing():
    cs = chain_stats([])
    assert cs.count == 0 and cs.mean_length == 0


# -- reports -------------------------------------------------------------------------


def stub_report(op_count=2000):
    spec = WorkloadSpec.preset("RunA", key_count=100, op_count=op_count, rate=1000.0, warmup_fraction=0.0)
    return build_report(run_open_loop(StubEngine(lambda r: 1000 + 37 * (r.index % 100)), spec), policy="stub", include_cpu=False)


def test_report_json_round_trip():
    rep = stub_report()
    back = Report.from_dict(json.loads(export_report(rep, "json")))
    assert back == rep
    assert rep.latency["all"].p50_ns == exact_percentile(1000 + 37 * (np.arange(2000) % 100), 50)


def test_report_csv_layout():
    rep = stub_report()
    lines = export_report(rep, "csv").decode().splitlines()
    assert lines[0].split(",") == CSV_COLUMNS
    assert len(lines) == 2
    row = dict(zip(CSV_COLUMNS, lines[1].split(",")))
    assert row["policy"] == "stub" and int(row["ops_completed"]) == 2000
    with pytest.raises(ValueError):
        export_report(rep, "xml")


def test_report_of_empty_run():
    rep = stub_report(op_count=0)
    assert rep.ops_completed == 0 and rep.latency["all"].count == 0
    assert export_report(rep, "csv")


def test_timeseries_csv_header():
    text = timeseries_csv(stub_report()).decode().splitlines()
    assert text[0] == "t_s,ops_per_s" and len(text) == 3


def test_latency_dump_round_trip():
    spec = WorkloadSpec.preset("RunA", key_count=100, op_count=500, rate=1000.0)
    lr = run_open_loop(StubEngine(lambda r: r.index), spec)
    tags, ns = load_latencies(dump_latencies(lr))
    assert np.array_equal(tags, lr.op_tags) and np.array_equal(ns, lr.latency_ns)
    assert len(dump_latencies(lr)) == 9 * 500


def deterministic_report():
    e = Engine(EngineConfig(policy=Policy.VLSM, sst_size=16 * KiB, bloom_bits_per_key=10))
    run_open_loop(e, WorkloadSpec.preset("LoadA", key_count=3000, rate=20_000.0))
    run = WorkloadSpec.preset("RunA", key_count=3000, op_count=3000, rate=2000.0)
    return build_report(run_open_loop(e, run), policy=e.config.policy.value, include_cpu=False)


def test_report_matches_golden():
    got = json.loads(export_report(deterministic_report(), "json"))
    assert got == json.loads(GOLDEN.read_text())
