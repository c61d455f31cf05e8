"""Command line entry points: bench runs, store stats, model inspection."""
from __future__ import annotations

import argparse
import json
import sys

from .bench import GcPolicy, WorkloadSpec, desk_config, run_bench
from .engine import Engine
from .gbdt import model_load


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="lifekv")
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="benchmark commands")
    bench_sub = bench.add_subparsers(dest="bench_command", required=True)
    run = bench_sub.add_parser("run", help="load a workload under a policy")
    run.add_argument("--workload", choices=["zipfian", "uniform"],
                     default="zipfian")
    run.add_argument("--theta", type=float, default=0.99)
    run.add_argument("--keys", type=int, default=100_000)
    run.add_argument("--ops", type=int, default=500_000)
    run.add_argument("--value-size", type=int, default=4096)
    run.add_argument("--key-size", type=int, default=24)
    run.add_argument("--policy", default="learned",
                     help="learned | nomodel | inline | ratio:<threshold>")
    run.add_argument("--seed", type=int, default=1)
    run.add_argument("--dir", required=True)
    run.add_argument("--out", default=None, help="report JSON path")
    run.add_argument("--wal", action="store_true", help="enable the WAL")
    run.add_argument("--initial-ttl", type=int, default=None,
                     help="override initial default TTL (default: ops/5)")
    run.add_argument("--quiet", action="store_true")

    db = sub.add_parser("db", help="store commands")
    db_sub = db.add_subparsers(dest="db_command", required=True)
    stats = db_sub.add_parser("stats", help="print store statistics")
    stats.add_argument("--dir", required=True)

    model = sub.add_parser("model", help="model commands")
    model_sub = model.add_subparsers(dest="model_command", required=True)
    dump = model_sub.add_parser("dump", help="print model summary")
    dump.add_argument("--dir", required=True)

    args = parser.parse_args(argv)

    if args.command == "bench":
        spec = WorkloadSpec(key_count=args.keys, op_count=args.ops,
                            value_size=args.value_size,
                            distribution=args.workload, theta=args.theta,
                            key_size=args.key_size, seed=args.seed)
        cfg = desk_config(args.ops, seed=args.seed, wal=args.wal)
        if args.initial_ttl is not None:
            cfg.lifetime.initial_default_ttl = args.initial_ttl
        policy = GcPolicy.parse(args.policy)
        report = run_bench(cfg, spec, policy, args.dir, args.out,
                           progress=not args.quiet)
        print(report.to_json())
        return 0

    if args.command == "db":
        eng = Engine(args.dir, auto_maintenance=False)
        try:
            print(json.dumps(eng.stats(), indent=2, default=str))
        finally:
            eng.close()
        return 0

    if args.command == "model":
        eng = Engine(args.dir, auto_maintenance=False)
        try:
            if not eng.model_version:
                print("no trained model", file=sys.stderr)
                return 1
            m = model_load(eng.fm.path(f"MODEL-{eng.model_version:06d}.txt"))
            gains = sorted(enumerate(m.feature_gain), key=lambda kv: -kv[1])
            print(json.dumps({
                "version": m.version,
                "trained_at_seq": m.trained_at_seq,
                "num_trees": m.num_trees,
                "num_nodes": m.num_nodes(),
                "top_feature_gains": [
                    {"slot": i, "gain": g} for i, g in gains[:10] if g > 0],
            }, indent=2))
        finally:
            eng.close()
        return 0

    return 2


if __name__ == "__main__":
    raise SystemExit(main())
