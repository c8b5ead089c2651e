# %% [markdown]
# Open-loop latency under a freeze
#
# Drives a loaded engine at a fixed rate, freezes it for two simulated seconds
# and shows that the stalled requests carry the full wait in their latency.

# %%
import numpy as np

from lsmkv.config import EngineConfig, Policy
from lsmkv.engine import Engine
from lsmkv.metrics import LatencyRecorder, throughput_timeseries
from lsmkv.workload import GENERATOR_MAX_RATE, NS_PER_S, OpType, WorkloadSpec, run_open_loop

KEYS = 50_000
engine = Engine(EngineConfig(policy=Policy.VLSM))
run_open_loop(engine, WorkloadSpec.preset("LoadA", key_count=KEYS), rate=GENERATOR_MAX_RATE)

# %%
spec = WorkloadSpec.preset("RunA", key_count=KEYS, op_count=20_000, rate=2000.0)
lr = run_open_loop(engine, spec, on_start=lambda t0: engine.freeze(2 * NS_PER_S, t0 + 4 * NS_PER_S))

# %%
for op in (OpType.READ, OpType.UPDATE):
    rec = LatencyRecorder()
    rec.record_many(lr.latencies(op))
    print(f"{op.value:<7} p50 {rec.percentile(50) / 1e3:9.1f} us   p99 {rec.percentile(99) / 1e3:11.1f} us   max {rec.max / 1e9:.3f} s")

# %%
series = throughput_timeseries(lr.completion_ns, lr.start_ns, lr.end_ns)
print("completions per second:", [int(v) for _, v in series])
print("requests waiting >= 1 s:", int(np.sum(lr.latency_ns >= NS_PER_S)))
