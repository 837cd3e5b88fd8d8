"""Benchmark CLI: run experiments, establish baselines, report, compare,
and execute compaction worker tasks.

    tenantkv run --config exp.json --out runs/exp1 [--seed 7]
    tenantkv baseline --config solo.json --out runs/base
    tenantkv report --events runs/exp1/events.ndjson --out runs/exp1
    tenantkv compare runs/a/summary.json runs/b/summary.json
    tenantkv compact-worker --task task.json --store /path/to/store
"""

import argparse
import json
import os
import sys

from ..compaction import run_task_file
from ..workload import Event, measure
from .harness import Experiment, ExperimentConfig, write_timeseries


def _load_config(args):
    config = ExperimentConfig.load(args.config)
    if args.out:
        config.out_dir = args.out
    if args.seed is not None:
        config.seed = args.seed
    return config


def cmd_run(args):
    config = _load_config(args)
    report = Experiment(config).run()
    if not report.valid:
        print("run produced no post-ramp events", file=sys.stderr)
        return 1
    for tenant, stats in sorted(report.per_tenant.items()):
        line = f"{tenant}: {stats['throughput']:.1f} ops/s p99={stats['p99'] * 1000:.1f}ms"
        if "violation" in stats:
            line += f" violation={stats['violation']:.3f}"
        print(line)
    if report.j is not None:
        print(f"J={report.j:.3f} E={report.e:.3f} D={report.d:.3f}")
    print(f"min-max ratio={report.minmax:.3f}")
    return 0


def cmd_baseline(args):
    config = _load_config(args)
    if len(config.tenants) != 1:
        print("baseline needs exactly one tenant", file=sys.stderr)
        return 1
    report = Experiment(config).run()
    if not report.valid:
        print("baseline run produced no post-ramp events", file=sys.stderr)
        return 1
    tenant = config.tenants[0].id
    baseline = report.per_tenant[tenant]["throughput"]
    out = args.out or config.out_dir or "."
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "baseline.json")
    with open(path, "w") as f:
        json.dump({"tenant": tenant, "baseline": baseline}, f, indent=2)
    print(f"{tenant}: baseline {baseline:.1f} ops/s -> {path}")
    return 0


def cmd_report(args):
    events = []
    with open(args.events) as f:
        for line in f:
            obj = json.loads(line)
            events.append(Event(obj["tenant"], obj["t"], obj["latency"],
                                obj["bytes"], obj["op"], obj.get("ok", True),
                                obj.get("cache_hit", False)))
    out = args.out or os.path.dirname(args.events) or "."
    os.makedirs(out, exist_ok=True)
    write_timeseries(events, os.path.join(out, "report.csv"))
    report = measure(events, ramp_up=args.ramp_up)
    with open(os.path.join(out, "report.json"), "w") as f:
        json.dump(report.to_json(), f, indent=2)
    print(f"wrote report.csv and report.json to {out}"
          + ("" if report.valid else " (no post-ramp events: flagged invalid)"))
    return 0


def _flatten(prefix, obj, out):
    if isinstance(obj, dict):
        for key, value in obj.items():
            _flatten(f"{prefix}.{key}" if prefix else key, value, out)
    elif isinstance(obj, (int, float)) and not isinstance(obj, bool):
        out[prefix] = float(obj)


def cmd_compare(args):
    summaries = []
    for path in (args.a, args.b):
        with open(path) as f:
            flat = {}
            _flatten("", json.load(f), flat)
            summaries.append(flat)
    a, b = summaries
    keys = sorted(set(a) & set(b))
    if not keys:
        print("summaries share no numeric fields", file=sys.stderr)
        return 1
    print(f"{'metric':<50} {'a':>12} {'b':>12} {'delta':>12}")
    for key in keys:
        print(f"{key:<50} {a[key]:>12.4f} {b[key]:>12.4f} {b[key] - a[key]:>12.4f}")
    return 0


def cmd_compact_worker(args):
    store = args.store or os.environ.get("TENANTKV_ROOT")
    if not store:
        print("no store root: pass --store or set TENANTKV_ROOT", file=sys.stderr)
        return 1
    payload = run_task_file(args.task, store, args.out)
    if not args.out:
        json.dump(payload, sys.stdout, indent=2)
        print()
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="tenantkv",
                                     description="multi-tenant KV benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="output directory")
    run.add_argument("--seed", type=int)
    run.set_defaults(func=cmd_run)

    base = sub.add_parser("baseline", help="dedicated single-tenant run")
    base.add_argument("--config", required=True)
    base.add_argument("--out")
    base.add_argument("--seed", type=int)
    base.set_defaults(func=cmd_baseline)

    rep = sub.add_parser("report", help="aggregate a raw event log")
    rep.add_argument("--events", required=True)
    rep.add_argument("--out")
    rep.add_argument("--ramp-up", type=float, default=0.0)
    rep.set_defaults(func=cmd_report)

    cmp_ = sub.add_parser("compare", help="print per-metric deltas")
    cmp_.add_argument("a")
    cmp_.add_argument("b")
    cmp_.set_defaults(func=cmd_compare)

    worker = sub.add_parser("compact-worker", help="execute one task file")
    worker.add_argument("--task", required=True)
    worker.add_argument("--store")
    worker.add_argument("--out")
    worker.set_defaults(func=cmd_compact_worker)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
