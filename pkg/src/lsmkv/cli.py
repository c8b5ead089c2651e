"""Command-line entry point: load, run, verify, matrix, report.

Configuration is a YAML document with optional ``engine``, ``workload``,
``device``, ``output_dir`` and ``matrix`` sections.  Any field can be
overridden with ``--set section.field=value`` (values are parsed as YAML).
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import os
import sys
import traceback
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import yaml

from . import __version__
from .compaction import chains_to_jsonl
from .config import EngineConfig
from .device import DeviceMode, DeviceModel
from .engine import MANIFEST_FORMAT, MANIFEST_NAME, Engine, open_engine
from .errors import LsmError
from .metrics import CSV_COLUMNS, SCHEMA_VERSION, Report, build_report, dump_latencies, export_report, rows_to_csv, timeseries_csv
from .oracle import run_fuzz
from .sst import FORMAT_VERSION as SST_FORMAT
from .workload import WorkloadSpec, run_open_loop

OUTPUT_ROOT_ENV = "LSMKV_OUTPUT_ROOT"
CONFIG_SNAPSHOT = "config.yaml"
FORMAT_FILE = "FORMAT"
MATRIX_KEYS = ("policy", "sst_size", "phi", "regions")


@dataclass
class BenchConfig:
    engine: EngineConfig = field(default_factory=EngineConfig)
    workload: WorkloadSpec = field(default_factory=lambda: WorkloadSpec.preset("RunA"))
    device: DeviceModel = field(default_factory=DeviceModel)
    output_dir: Path = Path("runs")
    matrix: dict[str, list] = field(default_factory=dict)

    def to_dict(self) -> dict:
        dev = asdict(self.device)
        dev["mode"] = self.device.mode.value
        return {
            "engine": self.engine.to_dict(),
            "workload": self.workload.to_dict(),
            "device": dev,
            "output_dir": str(self.output_dir),
            "matrix": self.matrix,
        }


def format_hash() -> str:
    """Short content hash of every on-disk/report format version."""
    versions = {"sst": SST_FORMAT, "manifest": MANIFEST_FORMAT, "report": SCHEMA_VERSION}
    return hashlib.sha1(json.dumps(versions, sort_keys=True).encode()).hexdigest()[:12]


def _set_path(tree: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise LsmError(f"--set {dotted}: {p} is not a section")
    node[parts[-1]] = value


def load_config(path: str | None, overrides: Sequence[str] = (), *, seed: int | None = None, deterministic: bool | None = None) -> BenchConfig:
    tree: dict = {}
    if path:
        with open(path) as fh:
            tree = yaml.safe_load(fh) or {}
        if not isinstance(tree, dict):
            raise LsmError(f"{path}: top level must be a mapping")
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise LsmError(f"--set expects key=value, got {item!r}")
        _set_path(tree, key.strip(), yaml.safe_load(raw))
    unknown = set(tree) - {"engine", "workload", "device", "output_dir", "matrix"}
    if unknown:
        raise LsmError(f"unknown config sections: {sorted(unknown)}")

    eng = dict(tree.get("engine") or {})
    wl = dict(tree.get("workload") or {})
    if seed is not None:
        eng["seed"] = seed
        wl["seed"] = seed
    if deterministic is not None:
        eng["deterministic"] = deterministic
    engine = EngineConfig.from_dict(eng)
    wl.setdefault("name", "RunA")
    workload = WorkloadSpec.from_dict(wl)

    dev = dict(tree.get("device") or {})
    known = {f.name for f in fields(DeviceModel)}
    if set(dev) - known:
        raise LsmError(f"unknown device fields: {sorted(set(dev) - known)}")
    dev.setdefault("mode", DeviceMode.SIMULATED.value if engine.deterministic else DeviceMode.FILE.value)
    dev["mode"] = DeviceMode(dev["mode"])
    device = DeviceModel(**dev)

    root = os.environ.get(OUTPUT_ROOT_ENV)
    out = Path(tree.get("output_dir") or (root if root else "runs"))
    if root and not Path(out).is_absolute() and tree.get("output_dir"):
        out = Path(root) / out
    matrix = tree.get("matrix") or {}
    bad = set(matrix) - set(MATRIX_KEYS)
    if bad:
        raise LsmError(f"unknown matrix keys: {sorted(bad)}")
    return BenchConfig(engine, workload, device, out, matrix)


def write_run_dir(
    out: Path,
    cfg: BenchConfig,
    report: Report,
    *,
    chains: list | None = None,
    latencies: bytes | None = None,
) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_SNAPSHOT).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    (out / FORMAT_FILE).write_text(format_hash() + "\n")
    (out / "report.json").write_bytes(export_report(report, "json"))
    (out / "report.csv").write_bytes(export_report(report, "csv"))
    (out / "timeseries.csv").write_bytes(timeseries_csv(report))
    if chains is not None:
        (out / "chains.jsonl").write_text(chains_to_jsonl(chains))
    if latencies is not None:
        (out / "latencies.bin").write_bytes(latencies)


def _data_dir(args, cfg: BenchConfig) -> Path:
    return Path(args.data) if args.data else cfg.output_dir / "data"


def _store_config(data: Path, fallback: EngineConfig) -> EngineConfig:
    snap = data / CONFIG_SNAPSHOT
    if snap.exists():
        tree = yaml.safe_load(snap.read_text()) or {}
        eng = tree.get("engine")
        if eng:
            return EngineConfig.from_dict(eng)
    return fallback


def do_load(cfg: BenchConfig, data: Path, *, rate: float | None = None) -> Report:
    """Populate an empty store with ``key_count`` inserts and return the load report."""
    if data.exists() and any(data.iterdir()):
        raise LsmError(f"refusing to load into non-empty directory {data}")
    spec = WorkloadSpec.preset(
        "LoadA", key_count=cfg.workload.key_count, key_size=cfg.workload.key_size,
        value_size=cfg.workload.value_size, seed=cfg.workload.seed, client_threads=cfg.workload.client_threads,
    )
    engine = open_engine(data, cfg.engine, cfg.device)
    lr = run_open_loop(engine, spec, rate=rate or cfg.workload.rate)
    engine.close()
    report = build_report(lr, policy=cfg.engine.policy.value)
    write_run_dir(data, cfg, report, chains=lr.chains, latencies=dump_latencies(lr))
    return report


def cmd_load(args, cfg: BenchConfig) -> int:
    data = _data_dir(args, cfg)
    report = do_load(cfg, data, rate=args.rate)
    print(f"loaded {report.ops_completed} keys into {data}: write_amp={report.write_amp:.3f} stalls={report.stall_count}")
    return 0


def cmd_run(args, cfg: BenchConfig) -> int:
    data = _data_dir(args, cfg)
    if not (data / MANIFEST_NAME).exists():
        raise LsmError(f"{data} holds no loaded store (run `load` first)")
    engine_cfg = _store_config(data, cfg.engine).with_(seed=cfg.engine.seed, deterministic=cfg.engine.deterministic)
    engine = open_engine(data, engine_cfg, cfg.device)
    spec = cfg.workload
    lr = run_open_loop(engine, spec, rate=args.rate)
    engine.close()
    report = build_report(lr, policy=engine_cfg.policy.value)
    out = Path(args.out) if args.out else data / "runs" / f"{spec.name}-seed{spec.seed}"
    write_run_dir(out, BenchConfig(engine_cfg, spec, cfg.device, cfg.output_dir), report, chains=lr.chains, latencies=dump_latencies(lr))
    p99 = report.latency["all"].p99_ns
    print(f"{spec.name}: {report.ops_completed} ops, p99={p99} ns, stalls={report.stall_count}, report in {out}")
    return 0


def cmd_verify(args, cfg: BenchConfig) -> int:
    failed = False
    if args.data:
        data = Path(args.data)
        engine = Engine(_store_config(data, cfg.engine), path=data)
        problems = engine.check_invariants()
        checked, audit = engine.audit_vssts()
        for p in problems + audit:
            print(f"FAIL invariant: {p}")
        failed |= bool(problems or audit)
        print(f"store {data}: {len(problems)} invariant problems, {checked} vSSTs audited, {len(audit)} audit problems")
    seeds = range(cfg.engine.seed, cfg.engine.seed + args.seeds)
    for seed in seeds:
        res = run_fuzz(cfg.engine, seed, args.ops, args.key_space)
        if res.ok:
            print(f"seed {seed}: ok ({res.gets_checked} gets checked)")
            continue
        failed = True
        print(f"FAIL seed {seed}: {res.detail or '; '.join(res.invariant_problems[:3])}")
        if res.first_failure is not None:
            print(f"  reproduce: lsmkv verify --seed {seed} --seeds 1 --ops {min(res.first_failure + 1, args.ops)} --key-space {args.key_space}")
    return 1 if failed else 0


def matrix_points(matrix: dict[str, list]) -> list[dict[str, Any]]:
    keys = [k for k in MATRIX_KEYS if matrix.get(k)]
    if not keys:
        raise LsmError("matrix is empty: give at least one of " + ", ".join(MATRIX_KEYS))
    return [dict(zip(keys, combo)) for combo in itertools.product(*(matrix[k] for k in keys))]


def point_name(point: dict[str, Any]) -> str:
    return ",".join(f"{k}={v}" for k, v in point.items())


def cmd_matrix(args, cfg: BenchConfig) -> int:
    points = matrix_points(cfg.matrix)
    root = cfg.output_dir / "matrix"
    rows = []
    failures = 0
    for point in points:
        out = root / point_name(point)
        row: dict[str, Any] = {f"param_{k}": v for k, v in point.items()}
        try:
            eng = cfg.engine.with_(**point)
            sub = BenchConfig(eng, cfg.workload, cfg.device, out)
            report = do_load(sub, out / "data", rate=args.rate)
            if args.workload:
                spec = WorkloadSpec.preset(
                    args.workload, key_count=cfg.workload.key_count, op_count=cfg.workload.op_count,
                    seed=cfg.workload.seed, rate=cfg.workload.rate,
                )
                engine = open_engine(out / "data", eng, cfg.device)
                lr = run_open_loop(engine, spec, rate=args.rate)
                engine.close()
                report = build_report(lr, policy=eng.policy.value)
                write_run_dir(out / spec.name, BenchConfig(eng, spec, cfg.device, out), report, chains=lr.chains)
            row.update(report.scalars())
            row["status"] = "ok"
        except Exception as exc:  # a failed point is recorded and the sweep continues
            failures += 1
            row["status"] = f"error: {type(exc).__name__}: {exc}"
            if args.verbose:
                traceback.print_exc()
        rows.append(row)
        print(f"{point_name(point)}: {row['status']}")
    root.mkdir(parents=True, exist_ok=True)
    columns = [f"param_{k}" for k in points[0]] + ["status"] + CSV_COLUMNS
    (root / "combined.csv").write_bytes(rows_to_csv(rows, columns))
    print(f"{len(rows)} rows written to {root / 'combined.csv'}")
    return 1 if failures else 0


def cmd_report(args, cfg: BenchConfig | None) -> int:
    path = Path(args.dir)
    src = path / "report.json" if path.is_dir() else path
    report = Report.from_dict(json.loads(src.read_text()))
    if args.format == "json":
        sys.stdout.write(export_report(report, "json").decode())
    elif args.format == "csv":
        sys.stdout.write(export_report(report, "csv").decode())
    else:
        print(f"workload {report.workload} policy {report.policy} rate {report.rate:.0f}/s")
        print(f"ops {report.ops_completed} in {report.duration_ns / 1e9:.3f} s ({report.achieved_ops_per_s:.0f} ops/s)")
        for op, lat in report.latency.items():
            print(f"  {op:7s} n={lat.count:<9d} p50={lat.p50_ns} p90={lat.p90_ns} p99={lat.p99_ns} max={lat.max_ns} ns")
        print(f"stalls {report.stall_count} total {report.stall_total_ns} ns max {report.stall_max_ns} ns")
        print(f"amp write {report.write_amp:.3f} read {report.read_amp:.3f} combined {report.combined_amp:.3f}")
        cs = report.chain_stats
        print(f"chains {cs.count} mean stage width {cs.mean_stage_width:.0f} B mean length {cs.mean_length:.2f} max {cs.max_length}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lsmkv", description="LSM key-value store benchmark driver")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field, e.g. engine.policy=lsmi")
    common.add_argument("--seed", type=int, help="seed for engine and workload")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None, help="simulated device and virtual clock")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("load", parents=[common], help="populate an empty store")
    p.add_argument("--data", help="store directory (default: <output_dir>/data)")
    p.add_argument("--rate", type=float, help="offered insert rate (default: workload.rate)")
    p.set_defaults(func=cmd_load)

    p = sub.add_parser("run", parents=[common], help="run a workload against a loaded store")
    p.add_argument("--data", help="store directory (default: <output_dir>/data)")
    p.add_argument("--out", help="run directory (default: <data>/runs/<workload>-seed<seed>)")
    p.add_argument("--rate", type=float)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", parents=[common], help="oracle fuzz plus invariant and vSST audits")
    p.add_argument("--data", help="also scan this store")
    p.add_argument("--ops", type=int, default=100_000)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--key-space", type=int, default=100_000)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("matrix", parents=[common], help="sweep matrix parameters sequentially")
    p.add_argument("--rate", type=float)
    p.add_argument("--workload", help="run this workload after each load")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("report", parents=[common], help="summarise a run directory")
    p.add_argument("dir")
    p.add_argument("--format", choices=["text", "json", "csv"], default="text")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = None
        if args.command != "report":
            cfg = load_config(args.config, args.set, seed=args.seed, deterministic=args.deterministic)
        return args.func(args, cfg)
    except (LsmError, OSError, ValueError, yaml.YAMLError) as exc:
        if args.verbose:
            traceback.print_exc()
        print(f"lsmkv {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
