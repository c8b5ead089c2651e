"""Desk-scale acceptance criteria.

Each test prints one ``CRITERION <n> PASS|FAIL: ...`` line (also collected
into the terminal summary) and then asserts the same condition. Expensive
LoadA runs are shared between criteria through session fixtures.
"""

import json
import math
import subprocess
import sys
from dataclasses import dataclass

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from lsmkv.config import EngineConfig, KiB, Policy
from lsmkv.device import Device
from lsmkv.engine import Engine
from lsmkv.metrics import LatencyRecorder, build_report, chain_stats, exact_percentile
from lsmkv.oracle import run_fuzz
from lsmkv.workload import (
    GENERATOR_MAX_RATE,
    NS_PER_S,
    OpType,
    WorkloadSpec,
    ZipfianState,
    completion_rate,
    pareto_next,
    run_open_loop,
)
from test_device import LEDGER, LEDGER_MODEL, SCRIPT

pytestmark = pytest.mark.acceptance

KEYS = 1_000_000
SEED = 42
FUZZ_SEEDS = range(10)
FUZZ_OPS = 1_000_000
SST = 256 * KiB


def record(num, ok, detail):
    line = f"CRITERION {num} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def desk(policy, **kw):
    return EngineConfig(policy=policy, sst_size=SST, seed=SEED, **kw)


def load_spec(**kw):
    return WorkloadSpec.preset("LoadA", key_count=KEYS, seed=SEED, **kw)


@dataclass
class LoadOutcome:
    config: EngineConfig
    rate: float
    report: object  # metrics.Report
    latency: object  # workload.LatencyReport
    sustainable: float
    stats: object
    audit: tuple
    stages: list
    runa: object = None  # workload.LatencyReport of the follow-up RunA mix


def do_load(config, rate, runa_ops=0):
    engine = Engine(config)
    lr = run_open_loop(engine, load_spec(), rate=rate)
    outcome = LoadOutcome(
        config=config,
        rate=rate,
        report=build_report(lr, policy=config.policy.value, include_cpu=False),
        latency=lr,
        sustainable=completion_rate(lr),
        stats=engine.stats,
        audit=engine.audit_vssts() if config.policy == Policy.VLSM else (0, []),
        stages=list(engine.stages),
    )
    if runa_ops:
        spec = WorkloadSpec.preset("RunA", key_count=KEYS, op_count=runa_ops, seed=SEED)
        outcome.runa = run_open_loop(engine, spec, rate=rate)
    return outcome


_CACHE = {}


def cached(key, fn):
    if key not in _CACHE:
        _CACHE[key] = fn()
    return _CACHE[key]


def profiled(policy, **kw):
    """LoadA offered at the generator cap; doubles as the sustainable-rate profile."""
    return cached(("profile", policy, tuple(sorted(kw.items()))), lambda: do_load(desk(policy, **kw), GENERATOR_MAX_RATE))


# -- 1 ---------------------------------------------------------------------------------


@pytest.mark.parametrize("policy", list(Policy))
def test_c1_map_oracle(policy):
    failures = []
    for seed in FUZZ_SEEDS:
        res = run_fuzz(desk(policy), seed, FUZZ_OPS)
        if not res.ok:
            failures.append(f"seed {seed}: {res.detail or res.invariant_problems[:2]}")
    ok = record(
        "1",
        not failures,
        f"{policy.value}: {len(FUZZ_SEEDS)} seeds x {FUZZ_OPS} ops, {len(failures)} failing seeds {failures[:1]}",
    )
    assert ok


# -- 2 ---------------------------------------------------------------------------------


def test_c2_vsst_invariants():
    out = profiled(Policy.VLSM)
    checked, problems = out.audit
    s = out.stats
    ok = record(
        "2",
        checked > 0 and not problems and s.vsst_violations == 0,
        f"{checked} L1 vSSTs audited, {len(problems)} bad; {s.vsst_violations} Poor fallbacks "
        f"of {s.vsst_violations + s.good_victim_jobs} L1 jobs; "
        f"{s.poor_vssts_created}/{s.vssts_created} vSSTs created Poor",
    )
    assert ok


# -- 3 ---------------------------------------------------------------------------------


def test_c3_chain_width_ordering():
    cs = {p: chain_stats_of(profiled(p)) for p in (Policy.VLSM, Policy.LSMI, Policy.TIERED_L0)}
    v, l, t = (cs[p] for p in (Policy.VLSM, Policy.LSMI, Policy.TIERED_L0))
    ordering = v.mean_stage_width < l.mean_stage_width < t.mean_stage_width
    ratio = t.mean_l0_total_bytes / v.mean_l0_total_bytes if v.mean_l0_total_bytes else math.inf
    ok = record(
        "3",
        ordering and ratio >= 10,
        f"mean stage width vlsm {v.mean_stage_width / KiB:.0f} KiB, lsmi {l.mean_stage_width / KiB:.0f} KiB, "
        f"tiered_l0 {t.mean_stage_width / KiB:.0f} KiB; L0 chain total tiered_l0/vlsm = {ratio:.1f}x (need >= 10)",
    )
    assert ok


def chain_stats_of(out):
    return chain_stats(out.latency.chains)


# -- 4 ---------------------------------------------------------------------------------

C4_KEYS = 100_000
C4_L1 = 8 * SST


def l0_stage_amplification(sst_size):
    cfg = EngineConfig(policy=Policy.LSMI, sst_size=sst_size, l1_target_override=C4_L1, seed=SEED)
    engine = Engine(cfg)
    run_open_loop(engine, WorkloadSpec.preset("LoadA", key_count=C4_KEYS, seed=SEED), rate=GENERATOR_MAX_RATE)
    l0 = [s for s in engine.stages if s.source_level == 0]
    return sum(s.bytes_read for s in l0) / sum(s.source_bytes for s in l0)


def test_c4_growth_factor_violation_trend():
    big, small = l0_stage_amplification(SST), l0_stage_amplification(SST // 8)
    model_big, model_small = 1 + C4_L1 / SST, 1 + C4_L1 / (SST // 8)
    within = all(abs(got / want - 1) <= 0.30 for got, want in ((big, model_big), (small, model_small)))
    ok = record(
        "4",
        small / big >= 4 and within,
        f"L0->L1 amplification {big:.1f} (model {model_big:.0f}) -> {small:.1f} (model {model_small:.0f}), "
        f"increase {small / big:.1f}x (need >= 4, each within 30% of model)",
    )
    assert ok


# -- 5 ---------------------------------------------------------------------------------

GENEROUS_DEBT = 64 * SST


def test_c5_amplification_parity():
    v, t = profiled(Policy.VLSM).report, profiled(Policy.TIERED_L0).report
    d = profiled(Policy.TIERED_L0_DEBT, debt_limit=GENEROUS_DEBT).report
    parity = abs(v.combined_amp / t.combined_amp - 1)
    debt_ratio = d.write_amp / t.write_amp
    ok = record(
        "5",
        parity <= 0.15 and debt_ratio >= 1.3,
        f"combined amp vlsm {v.combined_amp:.1f} vs tiered_l0 {t.combined_amp:.1f} ({parity:.0%} apart, need <= 15%); "
        f"debt write amp {d.write_amp:.1f} vs {t.write_amp:.1f} = {debt_ratio:.2f}x (need >= 1.3)",
    )
    assert ok


# -- 6 ---------------------------------------------------------------------------------


def at_own_rate(policy):
    return cached(("own80", policy), lambda: do_load(desk(policy), 0.8 * profiled(policy).sustainable))


def test_c6_stall_reduction():
    v, t = at_own_rate(Policy.VLSM).report, at_own_rate(Policy.TIERED_L0).report
    total_ratio = v.stall_total_ns / t.stall_total_ns if t.stall_total_ns else math.inf
    max_ratio = t.stall_max_ns / v.stall_max_ns if v.stall_max_ns else math.inf
    ok = record(
        "6",
        total_ratio <= 0.5 and max_ratio >= 3,
        f"stall total vlsm {v.stall_total_ns / 1e9:.2f} s vs tiered_l0 {t.stall_total_ns / 1e9:.2f} s "
        f"({total_ratio:.2f}x, need <= 0.5); max stall tiered_l0/vlsm {max_ratio:.1f}x (need >= 3); "
        f"rates {at_own_rate(Policy.VLSM).rate:.0f} / {at_own_rate(Policy.TIERED_L0).rate:.0f} ops/s",
    )
    assert ok


# -- 7 ---------------------------------------------------------------------------------

RUNA_OPS = 200_000


def at_tiered_rate(policy):
    rate = 0.8 * profiled(Policy.TIERED_L0).sustainable
    return cached(("tiered80", policy), lambda: do_load(desk(policy), rate, runa_ops=RUNA_OPS))


def p99(lr, op):
    return exact_percentile(lr.latencies(op), 99)


def test_c7_tail_latency_ordering():
    v, t = at_tiered_rate(Policy.VLSM), at_tiered_rate(Policy.TIERED_L0)
    ins = p99(v.latency, OpType.INSERT) / p99(t.latency, OpType.INSERT)
    rv, rt = p99(v.runa, OpType.READ), p99(t.runa, OpType.READ)
    ok = record(
        "7",
        ins <= 0.5 and rv < rt,
        f"at {v.rate:.0f} ops/s: P99 insert vlsm/tiered_l0 = {ins:.2f}x (need <= 0.5); "
        f"RunA P99 read vlsm {rv / 1e6:.2f} ms vs tiered_l0 {rt / 1e6:.2f} ms",
    )
    assert ok


# -- 8 ---------------------------------------------------------------------------------


def test_c8_histogram_p99():
    rng = np.random.default_rng(SEED)
    values = np.maximum(rng.lognormal(13, 2, 10_000).astype(np.int64), 1)
    rec = LatencyRecorder()
    rec.record_many(values)
    exact = exact_percentile(values, 99)
    err = abs(rec.percentile(99) - exact) / exact
    ok = record("8", err <= 0.001, f"P99 relative error {err:.5%} (need <= 0.1%)")
    assert ok


# -- 9 ---------------------------------------------------------------------------------


def test_c9_distributions():
    rng = np.random.default_rng(SEED)
    n = 1_000_000
    state = ZipfianState(KEYS)
    top = float(np.mean(state.ranks(rng.random(n)) == 0))
    analytic = 1.0 / math.fsum(k**-0.99 for k in range(1, KEYS + 1))
    draws = np.sort(pareto_next(rng, 10**12, size=n))
    ks = np.unique(draws)
    cdf = 1.0 - (1.0 / (ks + 2.0)) ** 1.16
    cdf_left = 1.0 - (1.0 / (ks + 1.0)) ** 1.16
    d = max(
        np.abs(np.searchsorted(draws, ks, side="right") / n - cdf).max(),
        np.abs(np.searchsorted(draws, ks, side="left") / n - cdf_left).max(),
    )
    ok = record(
        "9",
        abs(top - analytic) <= 0.02 and d < 0.01,
        f"Zipf top-rank {top:.4f} vs analytic {analytic:.4f} (need within 0.02); Pareto KS D = {d:.4f} (need < 0.01)",
    )
    assert ok


# -- 10 --------------------------------------------------------------------------------


def cli_run(tmp, name):
    out = tmp / name
    base = [sys.executable, "-m", "lsmkv"]
    common = ["--seed", str(SEED), "--deterministic", "--set", f"output_dir={out}",
              "--set", "workload.key_count=100000", "--set", "workload.op_count=50000"]
    subprocess.run(base + ["load"] + common, check=True, capture_output=True)
    subprocess.run(base + ["run"] + common, check=True, capture_output=True)
    run_dir = out / "data" / "runs" / f"RunA-seed{SEED}"
    report = json.loads((run_dir / "report.json").read_text())
    report.pop("cpu_per_op_ns")  # host CPU time, not simulated
    return report, (run_dir / "latencies.bin").read_bytes()


def test_c10_device_ledger_and_replay(tmp_path):
    dev = Device(LEDGER_MODEL)
    ids = []
    for op in SCRIPT:
        if op[0] == "w":
            ids.append(dev.write_object(bytes(op[1])))
        elif op[0] == "r":
            dev.read_object(ids[op[1]], op[2], op[3])
        else:
            dev.delete_object(ids[op[1]])
    s = dev.stats
    got = dict(bytes_written=s.bytes_written, bytes_read=s.bytes_read, write_ops=s.write_ops,
               read_ops=s.read_ops, clock_ns=dev.clock.now)
    (ra, la), (rb, lb) = cli_run(tmp_path, "a"), cli_run(tmp_path, "b")
    ok = record(
        "10",
        got == LEDGER and ra == rb and la == lb,
        f"50-op ledger {'matches' if got == LEDGER else f'differs: {got}'}; "
        f"two seeded executions {'bit-identical' if ra == rb and la == lb else 'differ'}",
    )
    assert ok


# -- 11 --------------------------------------------------------------------------------


def test_c11_freeze_visible_in_latency():
    engine = Engine(desk(Policy.VLSM))
    run_open_loop(engine, WorkloadSpec.preset("LoadA", key_count=100_000, seed=SEED), rate=GENERATOR_MAX_RATE)
    spec = WorkloadSpec.preset("RunA", key_count=100_000, op_count=20_000, rate=2000.0, seed=SEED)
    lr = run_open_loop(engine, spec, on_start=lambda t0: engine.freeze(2 * NS_PER_S, t0 + 5 * NS_PER_S))
    worst = int(lr.latency_ns.max())
    ok = record("11", worst >= 2 * NS_PER_S, f"max latency {worst / 1e9:.3f} s with a 2 s freeze (need >= 2 s)")
    assert ok
