"""Synthetic workloads of scientific workflows.

Five application profiles are approximated by layered DAG builders:

=============  ===========  =========  ==========
app type       parallelism  CPU        data
=============  ===========  =========  ==========
cybershake     very high    very high  very high
epigenome      medium       high*      low
ligo           medium-high  medium     high
montage        high         low        high
sipht          low          low        low
=============  ===========  =========  ==========

(*) epigenome is dominated by a long mapping stage, so its makespan barely
depends on data movement.

Entry tasks read external datasets drawn from per-application pools that are
shared by every workflow of that application in the workload. Dataset sizes
depend only on ``(seed, dataset id)``.

Workload files are JSON lines. The first record is a header; every following
``workflow`` record opens a workflow that owns the records up to the next one::

    {"record": "header", "format_version": 1, "seed": 7, "arrival_rate_per_min": 1.0}
    {"record": "workflow", "id": "w0", "app_type": "montage", "size_class": "small",
     "budget_cents": 4210, "arrival_s": 0.0}
    {"record": "task", "id": "t0", "size_mi": 40.0, "app_type": "montage"}
    {"record": "data", "id": "w0/d0", "size_mb": 80.0, "producer": "t0"}
    {"record": "edge", "parent": "t0", "child": "t1"}
    {"record": "input", "task": "t1", "data": "w0/d0"}

``budget_cents``, ``arrival_s``, ``size_class`` and ``producer`` are optional.
Unknown record types or fields are rejected.
"""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .engine import RngStreams
from .model import (
    CloudConfig,
    DataItem,
    SimulationError,
    Task,
    WorkflowJob,
    link,
    validate_dag,
)

APP_TYPES = ("cybershake", "epigenome", "ligo", "montage", "sipht")
SIZE_CLASSES = {"small": 50, "medium": 100, "large": 1000}
FORMAT_VERSION = 1


class ParseError(SimulationError):
    pass


@dataclass(frozen=True)
class Stage:
    """Log-uniform bounds for the tasks of one DAG stage."""

    mi: tuple[float, float]
    out_mb: tuple[float, float]


@dataclass(frozen=True)
class SharedPool:
    """External datasets reused by every workflow of an application."""

    prefix: str
    count: int
    size_mb: tuple[float, float]


@dataclass(frozen=True)
class AppProfile:
    app_type: str
    stages: dict
    pools: dict
    builder: Callable


@dataclass(frozen=True)
class WorkflowTemplate:
    app_type: str
    size_class: str

    @property
    def target_tasks(self) -> int:
        return SIZE_CLASSES[self.size_class]


@dataclass(frozen=True)
class WorkloadSpec:
    count: int
    arrival_rate_per_min: float
    seed: int = 0
    app_types: tuple[str, ...] = APP_TYPES
    size_classes: tuple[str, ...] = tuple(SIZE_CLASSES)

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if not self.arrival_rate_per_min > 0:
            raise ValueError("arrival_rate_per_min must be > 0")
        for a in self.app_types:
            if a not in PROFILES:
                raise ValueError(f"unknown app type {a!r}")
        for s in self.size_classes:
            if s not in SIZE_CLASSES:
                raise ValueError(f"unknown size class {s!r}")

    @property
    def templates(self) -> list[WorkflowTemplate]:
        return [WorkflowTemplate(a, s) for a in self.app_types for s in self.size_classes]

    @property
    def mean_gap_s(self) -> float:
        return 60.0 / self.arrival_rate_per_min


def _log_uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    if lo == hi:
        return float(lo)
    return float(math.exp(rng.uniform(math.log(lo), math.log(hi))))


class _DagBuilder:
    def __init__(self, wf_id: str, profile: AppProfile, rng: np.random.Generator, seed: int):
        self.wf_id = wf_id
        self.profile = profile
        self.rng = rng
        self.seed = seed
        self.tasks: dict[str, Task] = {}
        self._n_data = 0

    def shared(self, pool: str, index: int) -> DataItem:
        spec: SharedPool = self.profile.pools[pool]
        did = f"{self.profile.app_type}/{spec.prefix}{index % spec.count}"
        # size is a pure function of (seed, id) so every workflow sees the same item
        g = np.random.default_rng([self.seed & 0xFFFFFFFF, zlib.crc32(did.encode())])
        return DataItem(did, round(_log_uniform(g, *spec.size_mb), 3))

    def add(self, stage: str, parents: Sequence[Task] = (), *, external: Sequence[DataItem] = (),
            consume: Optional[Sequence[DataItem]] = None, n_out: int = 1) -> Task:
        st: Stage = self.profile.stages[stage]
        tid = f"t{len(self.tasks)}"
        task = Task(tid, self.wf_id, round(_log_uniform(self.rng, *st.mi), 3), self.profile.app_type)
        self.tasks[tid] = task
        for p in parents:
            link(self.tasks, p.id, tid)
        inputs = list(external)
        if consume is None:
            for p in parents:
                inputs.extend(p.outputs)
        else:
            inputs.extend(consume)
        task.inputs = inputs
        for _ in range(n_out):
            did = f"{self.wf_id}/d{self._n_data}"
            self._n_data += 1
            task.outputs.append(DataItem(did, round(_log_uniform(self.rng, *st.out_mb), 3), producer=tid))
        return task


def _montage(b: _DagBuilder, n: int) -> None:
    k = max(2, round((n - 6) / 3.5))
    n_diff = max(1, n - 2 * k - 6)
    start = int(b.rng.integers(b.profile.pools["raw"].count))
    proj = [b.add("project", external=[b.shared("raw", start + i)]) for i in range(k)]
    diffs = []
    for j in range(n_diff):
        a, c = proj[j % k], proj[(j + 1 + j // k) % k]
        diffs.append(b.add("diff", [a, c] if a is not c else [a]))
    concat = b.add("concat", diffs)
    bg = b.add("bgmodel", [concat])
    backs = [b.add("background", [p, bg]) for p in proj]
    tbl = b.add("imgtbl", backs, consume=[])
    add = b.add("add", backs + [tbl])
    shrink = b.add("shrink", [add])
    b.add("jpeg", [shrink])


def _cybershake(b: _DagBuilder, n: int) -> None:
    s = max(2, n // 50)
    m = max(1, (n - s - 2) // 2)
    site = int(b.rng.integers(b.profile.pools["sgt"].count))
    extracts = [b.add("extract", external=[b.shared("sgt", site + i)]) for i in range(s)]
    rv0 = int(b.rng.integers(b.profile.pools["rupture"].count))
    seis = [b.add("seismogram", [extracts[i % s]], external=[b.shared("rupture", rv0 + i)]) for i in range(m)]
    peaks = [b.add("peak", [x]) for x in seis]
    b.add("zipseis", seis)
    b.add("zippsa", peaks)


def _epigenome(b: _DagBuilder, n: int) -> None:
    lanes = max(1, n // 100)
    chunks = max(1, round((n - 2 * lanes - 2) / 4))
    per_lane = [chunks // lanes + (1 if i < chunks % lanes else 0) for i in range(lanes)]
    lane0 = int(b.rng.integers(b.profile.pools["lane"].count))
    ref = b.shared("reference", 0)
    merges = []
    for li, c in enumerate(per_lane):
        c = max(1, c)
        split = b.add("split", external=[b.shared("lane", lane0 + li)], n_out=c)
        maps = []
        for ci in range(c):
            f = b.add("filter", [split], consume=[split.outputs[ci]])
            s2 = b.add("sol2sanger", [f])
            bfq = b.add("fastq2bfq", [s2])
            maps.append(b.add("map", [bfq], external=[ref]))
        merges.append(b.add("merge", maps))
    idx = b.add("maqindex", merges)
    b.add("pileup", [idx])


def _ligo(b: _DagBuilder, n: int) -> None:
    blocks = max(1, round(n / 100))
    w = max(1, round((n / blocks - 2) / 4))
    f0 = int(b.rng.integers(b.profile.pools["frame"].count))
    for bi in range(blocks):
        frames = [b.shared("frame", f0 + bi * w + i) for i in range(w)]
        banks = [b.add("tmpltbank", external=[fr]) for fr in frames]
        insp = [b.add("inspiral", [bk], external=[fr]) for bk, fr in zip(banks, frames)]
        thinca = b.add("thinca", insp)
        trig = [b.add("trigbank", [thinca]) for _ in range(w)]
        insp2 = [b.add("inspiral", [tb], external=[fr]) for tb, fr in zip(trig, frames)]
        b.add("thinca", insp2)


def _sipht(b: _DagBuilder, n: int) -> None:
    chains = max(2, n // 40)
    length = max(1, (n - 2) // chains)
    g0 = int(b.rng.integers(b.profile.pools["genome"].count))
    ends = []
    for c in range(chains):
        t = b.add("patser", external=[b.shared("genome", g0 + c)])
        for _ in range(length - 1):
            t = b.add("findterm", [t])
        ends.append(t)
    join = b.add("srna", ends)
    b.add("annotate", [join])


PROFILES: dict[str, AppProfile] = {
    "montage": AppProfile(
        "montage",
        stages={
            "project": Stage((20, 60), (20, 50)),
            "diff": Stage((10, 30), (1, 5)),
            "concat": Stage((20, 40), (1, 2)),
            "bgmodel": Stage((40, 80), (1, 2)),
            "background": Stage((20, 60), (20, 50)),
            "imgtbl": Stage((10, 20), (1, 2)),
            "add": Stage((100, 200), (200, 500)),
            "shrink": Stage((20, 40), (10, 50)),
            "jpeg": Stage((10, 20), (5, 10)),
        },
        pools={"raw": SharedPool("raw", 400, (20, 60))},
        builder=_montage,
    ),
    "cybershake": AppProfile(
        "cybershake",
        stages={
            "extract": Stage((100, 300), (300, 600)),
            "seismogram": Stage((200, 800), (1, 5)),
            "peak": Stage((2, 10), (0.1, 1)),
            "zipseis": Stage((20, 40), (50, 200)),
            "zippsa": Stage((20, 40), (5, 20)),
        },
        pools={
            "sgt": SharedPool("sgt", 20, (1000, 2000)),
            "rupture": SharedPool("rv", 50, (5, 20)),
        },
        builder=_cybershake,
    ),
    "epigenome": AppProfile(
        "epigenome",
        stages={
            "split": Stage((20, 40), (2, 6)),
            "filter": Stage((40, 100), (2, 6)),
            "sol2sanger": Stage((10, 30), (2, 6)),
            "fastq2bfq": Stage((10, 30), (1, 3)),
            "map": Stage((800, 2000), (2, 6)),
            "merge": Stage((20, 40), (5, 20)),
            "maqindex": Stage((50, 100), (5, 10)),
            "pileup": Stage((50, 100), (5, 10)),
        },
        pools={
            "lane": SharedPool("lane", 20, (20, 50)),
            "reference": SharedPool("ref", 1, (50, 100)),
        },
        builder=_epigenome,
    ),
    "ligo": AppProfile(
        "ligo",
        stages={
            "tmpltbank": Stage((50, 150), (5, 20)),
            "inspiral": Stage((300, 900), (5, 20)),
            "thinca": Stage((5, 20), (1, 5)),
            "trigbank": Stage((5, 20), (1, 5)),
        },
        pools={"frame": SharedPool("frame", 100, (200, 400))},
        builder=_ligo,
    ),
    "sipht": AppProfile(
        "sipht",
        stages={
            "patser": Stage((20, 120), (1, 10)),
            "findterm": Stage((20, 120), (1, 10)),
            "srna": Stage((40, 120), (5, 10)),
            "annotate": Stage((20, 60), (1, 5)),
        },
        pools={"genome": SharedPool("genome", 10, (10, 30))},
        builder=_sipht,
    ),
}


def build_workflow(
    template: WorkflowTemplate,
    wf_id: str,
    rng: np.random.Generator,
    *,
    seed: int = 0,
    budget: int = 1,
    arrival_time: float = 0.0,
) -> WorkflowJob:
    """Instantiate *template* as a validated DAG (budget filled in later)."""
    profile = PROFILES[template.app_type]
    b = _DagBuilder(wf_id, profile, rng, seed)
    profile.builder(b, template.target_tasks)
    wf = WorkflowJob(wf_id, template.app_type, b.tasks, budget, arrival_time, template.size_class)
    validate_dag(wf)
    return wf


# -- cost bounds -------------------------------------------------------------


def min_cost_estimate(workflow: WorkflowJob, config: CloudConfig, *, containers: bool = True) -> int:
    """Cost of running every task back to back, in execution order, on a single
    VM of the cheapest type.

    The VM and container delays are charged once (to the first task). Data
    produced inside the workflow is already local; external inputs are read
    from global storage by every task that needs them.
    """
    from .scheduler import execution_order, single_vm_plan

    return int(single_vm_plan(execution_order(workflow, config), config, containers=containers).sum())


def max_cost_estimate(workflow: WorkflowJob, config: CloudConfig, *, containers: bool = True) -> int:
    """Cost of running every task on its own fresh VM of the fastest type."""
    from .scheduler import cost_table

    tasks = list(workflow.tasks.values())
    k = config.vm_catalogue.index(config.fastest)
    return int(cost_table(tasks, config, containers=containers)[:, k].sum())


def assign_budget(workflow: WorkflowJob, rng: np.random.Generator, config: CloudConfig) -> int:
    """Uniform integer budget between the min and max cost estimates (inclusive)."""
    lo = min_cost_estimate(workflow, config)
    hi = max_cost_estimate(workflow, config)
    if hi < lo:
        lo, hi = hi, lo
    workflow.budget = int(rng.integers(lo, hi + 1))
    return workflow.budget


def poisson_arrivals(count: int, rate_per_min: float, rng: np.random.Generator) -> list[float]:
    """Arrival times starting at 0 with exponential gaps of mean 60/rate seconds."""
    if count <= 0:
        return []
    gaps = rng.exponential(60.0 / rate_per_min, count - 1)
    return [0.0] + np.cumsum(gaps).tolist()


def generate_workload(spec: WorkloadSpec, config: CloudConfig) -> list[WorkflowJob]:
    rng = RngStreams(spec.seed)
    arrivals = poisson_arrivals(spec.count, spec.arrival_rate_per_min, rng["arrivals"])
    shape = rng["workload_shape"]
    budgets = rng["budgets"]
    templates = spec.templates
    jobs = []
    for i, at in enumerate(arrivals):
        tpl = templates[int(shape.integers(len(templates)))]
        wf = build_workflow(tpl, f"w{i}", shape, seed=spec.seed, arrival_time=float(at))
        assign_budget(wf, budgets, config)
        jobs.append(wf)
    return jobs


# -- workload files ------------------------------------------------------------

_FIELDS = {
    "header": ({"record", "format_version"}, {"seed", "arrival_rate_per_min"}),
    "workflow": ({"record", "id", "app_type"}, {"budget_cents", "arrival_s", "size_class"}),
    "task": ({"record", "id", "size_mi", "app_type"}, set()),
    "data": ({"record", "id", "size_mb"}, {"producer"}),
    "edge": ({"record", "parent", "child"}, set()),
    "input": ({"record", "task", "data"}, set()),
}


def write_workload(jobs: Iterable[WorkflowJob], path, *, seed: Optional[int] = None,
                   arrival_rate_per_min: Optional[float] = None) -> None:
    header = {"record": "header", "format_version": FORMAT_VERSION}
    if seed is not None:
        header["seed"] = seed
    if arrival_rate_per_min is not None:
        header["arrival_rate_per_min"] = arrival_rate_per_min
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for wf in jobs:
            rec = {"record": "workflow", "id": wf.id, "app_type": wf.app_type,
                   "budget_cents": int(wf.budget), "arrival_s": wf.arrival_time}
            if wf.size_class:
                rec["size_class"] = wf.size_class
            fh.write(json.dumps(rec) + "\n")
            for t in wf.tasks.values():
                fh.write(json.dumps({"record": "task", "id": t.id, "size_mi": t.size_mi,
                                     "app_type": t.app_type}) + "\n")
            for d in wf.data_items().values():
                rec = {"record": "data", "id": d.id, "size_mb": d.size_mb}
                if d.producer is not None:
                    rec["producer"] = d.producer
                fh.write(json.dumps(rec) + "\n")
            for t in wf.tasks.values():
                for s in t.successors:
                    fh.write(json.dumps({"record": "edge", "parent": t.id, "child": s}) + "\n")
            for t in wf.tasks.values():
                for d in t.inputs:
                    fh.write(json.dumps({"record": "input", "task": t.id, "data": d.id}) + "\n")


@dataclass
class _Pending:
    rec: dict
    line: int
    tasks: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    edges: list = field(default_factory=list)
    inputs: list = field(default_factory=list)


def _number(rec: dict, key: str, line: int) -> float:
    v = rec[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"line {line}: field {key!r} must be a number, got {v!r}")
    return v


def load_workflows(path, config: Optional[CloudConfig] = None, *, seed: Optional[int] = None,
                   arrival_rate_per_min: Optional[float] = None) -> list[WorkflowJob]:
    """Parse and validate a workload file.

    Missing arrival times are drawn as a Poisson process and missing budgets
    uniformly between the cost bounds, using the header's seed and rate unless
    overridden.
    """
    header = None
    pending: list[_Pending] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise ParseError(f"line {lineno}: expected an object")
            kind = rec.get("record")
            if kind not in _FIELDS:
                raise ParseError(f"line {lineno}: unknown record type {kind!r}")
            required, optional = _FIELDS[kind]
            missing = required - rec.keys()
            if missing:
                raise ParseError(f"line {lineno}: {kind} record missing field {sorted(missing)[0]!r}")
            extra = rec.keys() - required - optional
            if extra:
                raise ParseError(f"line {lineno}: {kind} record has unknown field {sorted(extra)[0]!r}")
            if kind == "header":
                if header is not None or pending:
                    raise ParseError(f"line {lineno}: header must be the first record")
                if rec["format_version"] != FORMAT_VERSION:
                    raise ParseError(f"line {lineno}: unsupported format_version {rec['format_version']!r}")
                header = rec
                continue
            if header is None:
                raise ParseError(f"line {lineno}: missing header record")
            if kind == "workflow":
                pending.append(_Pending(rec, lineno))
                continue
            if not pending:
                raise ParseError(f"line {lineno}: {kind} record before any workflow record")
            cur = pending[-1]
            if kind == "task":
                cur.tasks[str(rec["id"])] = (rec, lineno)
            elif kind == "data":
                cur.data[str(rec["id"])] = (rec, lineno)
            elif kind == "edge":
                cur.edges.append((str(rec["parent"]), str(rec["child"]), lineno))
            else:
                cur.inputs.append((str(rec["task"]), str(rec["data"]), lineno))
    if header is None:
        raise ParseError("empty workload file")

    jobs = []
    for p in pending:
        jobs.append(_assemble(p))

    seed = header.get("seed", 0) if seed is None else seed
    rate = header.get("arrival_rate_per_min", 1.0) if arrival_rate_per_min is None else arrival_rate_per_min
    rng = RngStreams(seed)
    arrivals = None
    for wf, p in zip(jobs, pending):
        if "arrival_s" not in p.rec:
            if arrivals is None:
                arrivals = poisson_arrivals(len(jobs), rate, rng["arrivals"])
            wf.arrival_time = arrivals[jobs.index(wf)]
        if "budget_cents" not in p.rec:
            if config is None:
                from .model import default_cloud

                config = default_cloud()
            assign_budget(wf, rng["budgets"], config)
        validate_dag(wf)
    return jobs


def _assemble(p: _Pending) -> WorkflowJob:
    rec, line = p.rec, p.line
    wf_id = str(rec["id"])
    data: dict[str, DataItem] = {}
    for did, (d, dl) in p.data.items():
        size = _number(d, "size_mb", dl)
        producer = d.get("producer")
        try:
            data[did] = DataItem(did, float(size), None if producer is None else str(producer))
        except ValueError as exc:
            raise ParseError(f"line {dl}: {exc}") from None
    tasks: dict[str, Task] = {}
    for tid, (t, tl) in p.tasks.items():
        size = _number(t, "size_mi", tl)
        try:
            tasks[tid] = Task(tid, wf_id, float(size), str(t["app_type"]))
        except ValueError as exc:
            raise ParseError(f"line {tl}: {exc}") from None
    for d in data.values():
        if d.producer is not None and d.producer in tasks:
            tasks[d.producer].outputs.append(d)
    from .model import DanglingEdge, OrphanDataItem

    for parent, child, el in p.edges:
        if parent not in tasks or child not in tasks:
            raise DanglingEdge(f"line {el}: edge {parent}->{child} references an unknown task")
        link(tasks, parent, child)
    for tid, did, il in p.inputs:
        if tid not in tasks:
            raise DanglingEdge(f"line {il}: input for unknown task {tid!r}")
        if did not in data:
            raise OrphanDataItem(f"line {il}: input references unknown data item {did!r}")
        tasks[tid].inputs.append(data[did])
    budget = int(_number(rec, "budget_cents", line)) if "budget_cents" in rec else 1
    arrival = float(_number(rec, "arrival_s", line)) if "arrival_s" in rec else 0.0
    wf = WorkflowJob(wf_id, str(rec["app_type"]), tasks, budget, arrival, str(rec.get("size_class", "")))
    if "budget_cents" in rec:
        validate_dag(wf)
    return wf
