# %% [markdown]
# Compaction chains per policy
#
# Loads the same dataset under each policy and compares how many bytes one
# chain of dependent compactions touches. Scaled down to 100k keys so it runs
# in about a minute.

# %%
from lsmkv.config import EngineConfig, KiB, Policy
from lsmkv.engine import Engine
from lsmkv.metrics import build_report, chain_stats
from lsmkv.workload import GENERATOR_MAX_RATE, WorkloadSpec, run_open_loop

KEYS = 100_000
spec = WorkloadSpec.preset("LoadA", key_count=KEYS)

# %%
rows = []
for policy in Policy:
    engine = Engine(EngineConfig(policy=policy, sst_size=64 * KiB))
    lr = run_open_loop(engine, spec, rate=GENERATOR_MAX_RATE)
    rep = build_report(lr, policy=policy.value, include_cpu=False)
    cs = chain_stats(lr.chains)
    rows.append((policy.value, cs.count, cs.mean_stage_width / KiB, cs.mean_l0_total_bytes / KiB, rep.write_amp, rep.stall_total_ns / 1e9))

# %%
print(f"{'policy':<16}{'chains':>8}{'stage KiB':>11}{'L0 chain KiB':>14}{'write amp':>11}{'stall s':>9}")
for name, n, width, l0_total, wamp, stall in rows:
    print(f"{name:<16}{n:>8}{width:>11.0f}{l0_total:>14.0f}{wamp:>11.1f}{stall:>9.2f}")
