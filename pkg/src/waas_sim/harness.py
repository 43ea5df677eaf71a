"""Experiment driver: configuration, replications, metrics and output files.

An experiment config is a JSON object::

    {
      "policy": "full",                      # full | ws | ns | nc
      "seed": 0,                             # first replication seed
      "replications": 10,                    # seeds seed, seed+1, ...
      "cloud": {
        "billing_period_s": 1.0,
        "vm_delay_s": 45.0,
        "container_delay_s": 10.0,
        "degradation": true,                 # false disables both samplers
        "cpu_degradation": {"mean": 12, "stddev": 10, "max": 24},
        "bandwidth_degradation": {"mean": 9.5, "stddev": 5, "max": 19}
      },
      "workload": {
        "count": 100,
        "arrival_rate_per_min": 1.0,
        "app_types": ["montage", ...],       # optional
        "size_classes": ["small", ...]       # optional
      },
      "workload_file": "path.jsonl",         # optional, replaces "workload"
      "sweep": {"axis": "vm_delay_s", "values": [45, 90, 135, 180]}
    }

Every key is optional. Sweep axes are ``arrival_rate_per_min``,
``cpu_max_degradation`` (percent), ``vm_delay_s`` and ``container_delay_s``.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .engine import EventKind, Simulator, charged_cents
from .model import CloudConfig, Degradation, SimulationError, default_cloud
from .scheduler import EbpsmScheduler, SharingPolicy
from .workload import APP_TYPES, SIZE_CLASSES, WorkloadSpec, generate_workload, load_workflows

PERCENTILES = (10, 30, 50, 70, 90)
WORKFLOW_COLUMNS = ("id", "app_type", "size_class", "arrival_s", "makespan_s", "cost", "budget", "met")
PLATFORM_COLUMNS = ("seed", "policy", "avg_vm_utilization", "total_charged_cents", "vm_count", "vms_by_type")
SWEEP_AXES = ("arrival_rate_per_min", "cpu_max_degradation", "vm_delay_s", "container_delay_s")
NO_VIOLATIONS = "no violations"


class ConfigError(SimulationError):
    pass


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple[float, ...]

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}; expected one of {', '.join(SWEEP_AXES)}")
        if not self.values:
            raise ConfigError("sweep needs at least one value")
        for v in self.values:
            if not v > 0:
                raise ConfigError(f"sweep value {v!r} must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    cloud: CloudConfig = field(default_factory=default_cloud)
    workload: WorkloadSpec = WorkloadSpec(count=100, arrival_rate_per_min=1.0)
    policy: SharingPolicy = SharingPolicy.FULL
    seeds: tuple[int, ...] = (0,)
    workload_file: Optional[str] = None
    sweep: Optional[SweepSpec] = None

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one replication seed is required")
        object.__setattr__(self, "policy", SharingPolicy.parse(self.policy))

    def with_seeds(self, seeds: Iterable[int]) -> "ExperimentConfig":
        return dataclasses.replace(self, seeds=tuple(seeds))

    def with_axis(self, axis: str, value: float) -> "ExperimentConfig":
        """Copy with one sweep axis set to *value*."""
        cloud = self.cloud
        if axis == "arrival_rate_per_min":
            return dataclasses.replace(
                self, workload=dataclasses.replace(self.workload, arrival_rate_per_min=float(value))
            )
        if axis == "cpu_max_degradation":
            d = cloud.cpu_degradation
            cloud = dataclasses.replace(cloud, cpu_degradation=Degradation(d.mean, d.stddev, float(value)))
        elif axis == "vm_delay_s":
            cat = tuple(dataclasses.replace(vt, provisioning_delay_s=float(value)) for vt in cloud.vm_catalogue)
            cloud = dataclasses.replace(cloud, vm_catalogue=cat)
        elif axis == "container_delay_s":
            imgs = tuple(dataclasses.replace(i, init_delay_s=float(value)) for i in cloud.container_images)
            cloud = dataclasses.replace(cloud, container_images=imgs, default_container_delay_s=float(value))
        else:
            raise ConfigError(f"unknown sweep axis {axis!r}")
        return dataclasses.replace(self, cloud=cloud)


def _degradation(raw: dict, default: Degradation) -> Degradation:
    unknown = set(raw) - {"mean", "stddev", "max"}
    if unknown:
        raise ConfigError(f"unknown degradation field {sorted(unknown)[0]!r}")
    return Degradation(
        float(raw.get("mean", default.mean)),
        float(raw.get("stddev", default.stddev)),
        float(raw.get("max", default.max)),
    )


def _check_keys(section: str, raw: dict, allowed: set) -> None:
    if not isinstance(raw, dict):
        raise ConfigError(f"{section} must be an object")
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown {section} field {sorted(unknown)[0]!r}")


def cloud_from_dict(raw: dict) -> CloudConfig:
    _check_keys("cloud", raw, {
        "billing_period_s", "vm_delay_s", "container_delay_s", "degradation",
        "cpu_degradation", "bandwidth_degradation", "idle_threshold_s", "provision_check_interval_s",
    })
    base = default_cloud()
    kw = {}
    if "vm_delay_s" in raw:
        kw["vm_delay_s"] = float(raw["vm_delay_s"])
    for key in ("billing_period_s", "idle_threshold_s", "provision_check_interval_s"):
        if key in raw:
            kw[key] = float(raw[key])
    if "container_delay_s" in raw:
        kw["default_container_delay_s"] = float(raw["container_delay_s"])
    cpu = _degradation(raw.get("cpu_degradation", {}), base.cpu_degradation)
    bw = _degradation(raw.get("bandwidth_degradation", {}), base.bandwidth_degradation)
    if not raw.get("degradation", True):
        cpu = bw = Degradation(0.0, 0.0, 0.0)
    try:
        return default_cloud(cpu_degradation=cpu, bandwidth_degradation=bw, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def config_from_dict(raw: dict, *, base_dir: Optional[Path] = None) -> ExperimentConfig:
    _check_keys("config", raw, {"policy", "seed", "seeds", "replications", "cloud", "workload",
                                "workload_file", "sweep"})
    cloud = cloud_from_dict(raw.get("cloud", {}))
    wl = raw.get("workload", {})
    _check_keys("workload", wl, {"count", "arrival_rate_per_min", "app_types", "size_classes"})
    seed = int(raw.get("seed", 0))
    try:
        spec = WorkloadSpec(
            count=int(wl.get("count", 100)),
            arrival_rate_per_min=float(wl.get("arrival_rate_per_min", 1.0)),
            seed=seed,
            app_types=tuple(wl.get("app_types", APP_TYPES)),
            size_classes=tuple(wl.get("size_classes", SIZE_CLASSES)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if "seeds" in raw:
        seeds = tuple(int(s) for s in raw["seeds"])
    else:
        n = int(raw.get("replications", 1))
        if n < 1:
            raise ConfigError("replications must be >= 1")
        seeds = tuple(range(seed, seed + n))
    sweep = None
    if "sweep" in raw:
        s = raw["sweep"]
        _check_keys("sweep", s, {"axis", "values"})
        sweep = SweepSpec(str(s.get("axis")), tuple(float(v) for v in s.get("values", ())))
    wfile = raw.get("workload_file")
    if wfile is not None and base_dir is not None and not os.path.isabs(wfile):
        wfile = str(base_dir / wfile)
    try:
        policy = SharingPolicy.parse(raw.get("policy", "full"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(cloud, spec, policy, seeds, wfile, sweep)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} ({exc.msg})") from None
    return config_from_dict(raw, base_dir=path.parent)


# -- metrics ------------------------------------------------------------------


@dataclass(frozen=True)
class WorkflowResult:
    id: str
    app_type: str
    size_class: str
    arrival_s: float
    makespan_s: float
    cost: int
    budget: int

    @property
    def met(self) -> bool:
        return self.cost <= self.budget

    @property
    def ratio(self) -> float:
        return self.cost / self.budget


@dataclass
class RunMetrics:
    seed: int
    policy: str
    workflows: list[WorkflowResult]
    avg_vm_utilization: float
    vm_count_by_type: dict[str, int]
    total_charged_cents: int
    events: int = 0
    trace: Optional[list[str]] = None

    @property
    def budget_met_pct(self) -> float:
        if not self.workflows:
            return 100.0
        return 100.0 * sum(w.met for w in self.workflows) / len(self.workflows)

    @property
    def total_cost(self) -> int:
        return sum(w.cost for w in self.workflows)


def _vm_utilization(sim: Simulator) -> float:
    bp = sim.config.billing_period_s
    ratios = []
    for vm in sim.vms.values():
        charged = vm.charged_seconds(bp, sim.clock)
        if charged > 0:
            ratios.append(min(1.0, vm.busy_seconds_accumulated / charged))
    return float(np.mean(ratios)) if ratios else 0.0


def simulate(jobs, cloud: CloudConfig, policy, seed: int, *, trace: bool = False, **sched_kw):
    """Run *jobs* to completion; returns the finished simulator and scheduler."""
    sim = Simulator(cloud, seed, trace=trace)
    sched = EbpsmScheduler(sim, policy, **sched_kw)
    for wf in jobs:
        sim.schedule_event(wf.arrival_time, EventKind.WORKFLOW_ARRIVAL, wf)
    sim.run_until_idle()
    return sim, sched


def collect_metrics(sim: Simulator, sched: EbpsmScheduler, jobs, seed: int) -> RunMetrics:
    results = []
    for wf in jobs:
        if wf.exit_finish_time is None:
            raise SimulationError(f"workflow {wf.id} did not complete")
        results.append(WorkflowResult(
            wf.id, wf.app_type, wf.size_class, wf.arrival_time,
            wf.exit_finish_time - wf.arrival_time,
            sum(t.actual_cost for t in wf.tasks.values()),
            int(wf.budget),
        ))
    counts = {vt.name: 0 for vt in sim.config.vm_catalogue}
    for vm in sim.vms.values():
        counts[vm.vm_type.name] += 1
    bp = sim.config.billing_period_s
    return RunMetrics(
        seed=seed,
        policy=sched.policy.value,
        workflows=results,
        avg_vm_utilization=_vm_utilization(sim),
        vm_count_by_type=counts,
        total_charged_cents=sum(charged_cents(vm, bp) for vm in sim.vms.values()),
        events=sim.dispatched,
        trace=sim.trace_lines,
    )


def run_replication(config: ExperimentConfig, seed: int, *, trace: bool = False) -> RunMetrics:
    if config.workload_file:
        jobs = load_workflows(config.workload_file, config.cloud, seed=seed)
    else:
        spec = dataclasses.replace(config.workload, seed=seed)
        jobs = generate_workload(spec, config.cloud)
    try:
        sim, sched = simulate(jobs, config.cloud, config.policy, seed, trace=trace)
    except SimulationError as exc:
        raise type(exc)(f"replication seed={seed}: {exc}") from exc
    return collect_metrics(sim, sched, jobs, seed)


def run_experiment(config: ExperimentConfig, *, trace: bool = False) -> list[RunMetrics]:
    """One :class:`RunMetrics` per replication, sorted by seed."""
    return [run_replication(config, s, trace=trace) for s in sorted(config.seeds)]


def sweep(config: ExperimentConfig, axis: Optional[str] = None, values: Optional[Sequence[float]] = None):
    """Run the experiment once per axis value; returns ``[(value, [RunMetrics])]``."""
    if axis is None:
        if config.sweep is None:
            raise ConfigError("no sweep axis given")
        axis, values = config.sweep.axis, config.sweep.values
    spec = SweepSpec(axis, tuple(values))
    return [(v, run_experiment(config.with_axis(spec.axis, v))) for v in spec.values]


# -- summaries ------------------------------------------------------------------


def percentile(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the smallest value with at least p% of the data at or below it."""
    if not values:
        raise ValueError("percentile of an empty sequence")
    if not 0 <= p <= 100:
        raise ValueError("p must be within [0, 100]")
    ordered = sorted(values)
    rank = max(1, math.ceil(p / 100.0 * len(ordered) - 1e-12))
    return ordered[rank - 1]


def _quartiles(values: Sequence[float]) -> dict:
    if not values:
        return {"n": 0}
    return {
        "n": len(values),
        "q1": percentile(values, 25),
        "median": percentile(values, 50),
        "q3": percentile(values, 75),
    }


def summarize(runs: Sequence[RunMetrics]) -> dict:
    if not runs:
        raise ValueError("summarize needs at least one replication")
    runs = sorted(runs, key=lambda r: r.seed)
    all_wf = [w for r in runs for w in r.workflows]
    by_app: dict[str, list[float]] = {}
    for w in all_wf:
        by_app.setdefault(w.app_type, []).append(w.makespan_s)
    violated = [w.ratio for w in all_wf if not w.met]
    vm_counts: dict[str, int] = {}
    for r in runs:
        for name, c in r.vm_count_by_type.items():
            vm_counts[name] = vm_counts.get(name, 0) + c
    met_pcts = [r.budget_met_pct for r in runs]
    return {
        "replications": len(runs),
        "seeds": [r.seed for r in runs],
        "policy": runs[0].policy,
        "workflows": len(all_wf),
        "budget_met_pct": float(np.mean(met_pcts)),
        "budget_met_pct_by_run": met_pcts,
        "makespan_by_app": {a: _quartiles(v) for a, v in sorted(by_app.items())},
        "makespan_median": percentile([w.makespan_s for w in all_wf], 50) if all_wf else None,
        "violations": len(violated),
        "violation_ratio_percentiles": (
            {str(p): percentile(violated, p) for p in PERCENTILES} if violated else NO_VIOLATIONS
        ),
        "avg_vm_utilization": float(np.mean([r.avg_vm_utilization for r in runs])),
        "vm_count_by_type": vm_counts,
        "total_cost_cents": sum(r.total_cost for r in runs),
        "total_charged_cents": sum(r.total_charged_cents for r in runs),
    }


def format_report(summary: dict) -> str:
    lines = [
        f"policy: {summary['policy']}",
        f"replications: {summary['replications']} (seeds {', '.join(map(str, summary['seeds']))})",
        f"workflows: {summary['workflows']}",
        f"budget met: {summary['budget_met_pct']:.2f}%",
        f"mean VM utilization: {summary['avg_vm_utilization']:.4f}",
        f"attributed cost: {summary['total_cost_cents']} cents; charged: {summary['total_charged_cents']} cents",
        "VMs leased: " + ", ".join(f"{k}={v}" for k, v in summary["vm_count_by_type"].items()),
        "",
        "makespan by app type (s):",
        f"  {'app':<12}{'n':>6}{'q1':>12}{'median':>12}{'q3':>12}",
    ]
    for app, q in summary["makespan_by_app"].items():
        lines.append(f"  {app:<12}{q['n']:>6}{q['q1']:>12.1f}{q['median']:>12.1f}{q['q3']:>12.1f}")
    lines += ["", f"cost/budget ratio of violated workflows ({summary['violations']}):"]
    pct = summary["violation_ratio_percentiles"]
    if pct == NO_VIOLATIONS:
        lines.append(f"  {NO_VIOLATIONS}")
    else:
        lines.append("  " + "  ".join(f"p{p}={pct[str(p)]:.3f}" for p in PERCENTILES))
    return "\n".join(lines) + "\n"


# -- output files -----------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_workflow_csv(run: RunMetrics, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(WORKFLOW_COLUMNS)
        for r in run.workflows:
            w.writerow([r.id, r.app_type, r.size_class, _fmt(r.arrival_s), _fmt(r.makespan_s),
                        r.cost, r.budget, int(r.met)])


def write_platform_csv(runs: Sequence[RunMetrics], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PLATFORM_COLUMNS)
        for r in sorted(runs, key=lambda r: r.seed):
            w.writerow([r.seed, r.policy, _fmt(r.avg_vm_utilization), r.total_charged_cents,
                        sum(r.vm_count_by_type.values()),
                        ";".join(f"{k}={v}" for k, v in r.vm_count_by_type.items())])


def _metrics_json(runs: Sequence[RunMetrics]) -> list[dict]:
    out = []
    for r in sorted(runs, key=lambda r: r.seed):
        out.append({
            "seed": r.seed,
            "policy": r.policy,
            "avg_vm_utilization": r.avg_vm_utilization,
            "vm_count_by_type": r.vm_count_by_type,
            "total_charged_cents": r.total_charged_cents,
            "events": r.events,
            "workflows": [dataclasses.asdict(w) for w in r.workflows],
        })
    return out


def runs_from_json(raw: list[dict]) -> list[RunMetrics]:
    return [
        RunMetrics(
            seed=r["seed"], policy=r["policy"],
            workflows=[WorkflowResult(**w) for w in r["workflows"]],
            avg_vm_utilization=r["avg_vm_utilization"],
            vm_count_by_type=r["vm_count_by_type"],
            total_charged_cents=r["total_charged_cents"],
            events=r.get("events", 0),
        )
        for r in raw
    ]


def load_metrics(path) -> list[RunMetrics]:
    path = Path(path)
    if path.is_dir():
        path = path / "metrics.json"
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"metrics file not found: {path}") from None
    return runs_from_json(raw)


def emit_outputs(runs: Sequence[RunMetrics], out_dir, *, summary: Optional[dict] = None) -> list[Path]:
    """Write per-replication workflow CSVs, platform CSV, metrics JSON and a text report.

    Traces recorded during the runs are written as ``trace_seed<N>.tsv``.
    """
    out = Path(out_dir)
    if not out.is_dir():
        raise FileNotFoundError(f"output directory does not exist: {out}")
    summary = summary if summary is not None else summarize(runs)
    written = []
    try:
        for r in sorted(runs, key=lambda r: r.seed):
            p = out / f"workflows_seed{r.seed}.csv"
            write_workflow_csv(r, p)
            written.append(p)
            if r.trace is not None:
                p = out / f"trace_seed{r.seed}.tsv"
                with open(p, "w", encoding="utf-8") as fh:
                    fh.write("time_s\tseq\tkind\tsubjects\n")
                    fh.writelines(line + "\n" for line in r.trace)
                written.append(p)
        p = out / "platform.csv"
        write_platform_csv(runs, p)
        written.append(p)
        p = out / "metrics.json"
        p.write_text(json.dumps(_metrics_json(runs), indent=1) + "\n", encoding="utf-8")
        written.append(p)
        p = out / "report.txt"
        p.write_text(format_report(summary), encoding="utf-8")
        written.append(p)
    except OSError as exc:
        raise OSError(f"writing outputs to {out}: {exc}") from exc
    return written
