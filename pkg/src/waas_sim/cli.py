"""Command line entry point: ``python -m waas_sim {generate,run,sweep,report}``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .harness import (
    SWEEP_AXES,
    ConfigError,
    ExperimentConfig,
    emit_outputs,
    format_report,
    load_config,
    load_metrics,
    run_experiment,
    summarize,
)
from .model import SimulationError
from .scheduler import SharingPolicy
from .workload import APP_TYPES, SIZE_CLASSES, WorkloadSpec, generate_workload, write_workload

POLICIES = [p.value for p in SharingPolicy]


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    seed = args.seed if args.seed is not None else min(cfg.seeds)
    n = args.replications if args.replications is not None else len(cfg.seeds)
    if n < 1:
        raise ConfigError("--replications must be >= 1")
    if args.seed is not None or args.replications is not None:
        cfg = cfg.with_seeds(range(seed, seed + n))
    if args.policy:
        cfg = dataclasses.replace(cfg, policy=SharingPolicy.parse(args.policy))
    return cfg


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    from .harness import cloud_from_dict

    cloud = cloud_from_dict({})
    spec = WorkloadSpec(args.count, args.rate, args.seed or 0,
                        tuple(args.apps or APP_TYPES), tuple(args.sizes or SIZE_CLASSES))
    jobs = generate_workload(spec, cloud)
    out = Path(args.out)
    if out.suffix != ".jsonl":
        out = _out_dir(args.out) / "workload.jsonl"
    write_workload(jobs, out, seed=spec.seed, arrival_rate_per_min=spec.arrival_rate_per_min)
    print(f"wrote {len(jobs)} workflows ({sum(len(w.tasks) for w in jobs)} tasks) to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = _config(args)
    runs = run_experiment(cfg, trace=args.trace)
    summary = summarize(runs)
    out = _out_dir(args.out)
    emit_outputs(runs, out, summary=summary)
    sys.stdout.write(format_report(summary))
    print(f"outputs in {out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    axis = args.axis or (cfg.sweep.axis if cfg.sweep else None)
    values = args.values or (cfg.sweep.values if cfg.sweep else None)
    if axis is None or not values:
        raise ConfigError("sweep needs --axis and --values (or a 'sweep' section in the config)")
    out = _out_dir(args.out)
    index = []
    print(f"{axis:>22}  {'budget met %':>12}  {'median makespan':>16}  {'utilization':>11}")
    for v in values:
        runs = run_experiment(cfg.with_axis(axis, v), trace=args.trace)
        summary = summarize(runs)
        sub = _out_dir(str(out / f"{axis}={v:g}"))
        emit_outputs(runs, sub, summary=summary)
        index.append({"value": v, "dir": sub.name, "budget_met_pct": summary["budget_met_pct"],
                      "makespan_median": summary["makespan_median"],
                      "avg_vm_utilization": summary["avg_vm_utilization"]})
        print(f"{v:>22g}  {summary['budget_met_pct']:>12.2f}  {summary['makespan_median'] or 0:>16.1f}"
              f"  {summary['avg_vm_utilization']:>11.4f}")
    (out / "sweep.json").write_text(json.dumps({"axis": axis, "points": index}, indent=1) + "\n")
    return 0


def cmd_report(args) -> int:
    runs = load_metrics(args.metrics)
    summary = summarize(runs)
    sys.stdout.write(format_report(summary))
    if args.out:
        out = _out_dir(args.out)
        (out / "report.txt").write_text(format_report(summary), encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="waas-sim", description="Multi-tenant workflow scheduling simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int, help="first replication seed")
        sp.add_argument("--out", required=out_required, help="output directory")

    g = sub.add_parser("generate", help="write a workload file")
    common(g)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--rate", type=float, default=1.0, help="arrivals per minute")
    g.add_argument("--apps", nargs="+", choices=APP_TYPES)
    g.add_argument("--sizes", nargs="+", choices=list(SIZE_CLASSES))
    g.set_defaults(func=cmd_generate)

    for name, func, helptext in (("run", cmd_run, "run an experiment"),
                                 ("sweep", cmd_sweep, "sweep one parameter")):
        r = sub.add_parser(name, help=helptext)
        common(r)
        r.add_argument("--config", help="experiment config (JSON)")
        r.add_argument("--policy", choices=POLICIES)
        r.add_argument("--replications", type=int)
        r.add_argument("--trace", action="store_true", help="export event traces")
        r.set_defaults(func=func)
        if name == "sweep":
            r.add_argument("--axis", choices=SWEEP_AXES)
            r.add_argument("--values", nargs="+", type=float)

    rep = sub.add_parser("report", help="summarize stored metrics")
    rep.add_argument("metrics", help="metrics.json or a run output directory")
    rep.add_argument("--out", help="also write report.txt here")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SimulationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
