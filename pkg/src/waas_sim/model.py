"""Domain types and the closed-form time/cost arithmetic of the platform.

Units used throughout: seconds, megabytes, MB/s, MI, MIPS, integer cents.
"""
from __future__ import annotations

import enum
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

# Float slack used when rounding up to billing periods, so that 155.0000000001 s
# is billed as 155 s and not 156 s.
BILLING_EPS = 1e-9


class SimulationError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(SimulationError):
    pass


class CyclicGraph(ValidationError):
    pass


class DanglingEdge(ValidationError):
    pass


class OrphanDataItem(ValidationError):
    pass


class TaskState(enum.Enum):
    WAITING = "waiting"
    READY = "ready"
    QUEUED = "queued"
    RUNNING = "running"
    COMPLETED = "completed"


_TASK_TRANSITIONS = {
    TaskState.WAITING: TaskState.READY,
    TaskState.READY: TaskState.QUEUED,
    TaskState.QUEUED: TaskState.RUNNING,
    TaskState.RUNNING: TaskState.COMPLETED,
}


class VmState(enum.Enum):
    PROVISIONING = "provisioning"
    IDLE = "idle"
    BUSY = "busy"
    TERMINATED = "terminated"


@dataclass(frozen=True)
class DataItem:
    id: str
    size_mb: float
    producer: Optional[str] = None

    def __post_init__(self):
        if not self.size_mb > 0:
            raise ValueError(f"data item {self.id!r}: size_mb must be > 0")


@dataclass(eq=False)
class Task:
    id: str
    workflow_id: str
    size_mi: float
    app_type: str
    inputs: list[DataItem] = field(default_factory=list)
    outputs: list[DataItem] = field(default_factory=list)
    predecessors: list[str] = field(default_factory=list)
    successors: list[str] = field(default_factory=list)
    level: int = 0
    sub_budget: int = 0
    state: TaskState = TaskState.WAITING
    # runtime bookkeeping, filled in by the scheduler and engine
    index: int = field(default=-1, repr=False)
    ready_at: Optional[float] = field(default=None, repr=False)
    assigned_vm: Optional["Vm"] = field(default=None, repr=False)
    assigned_at: Optional[float] = field(default=None, repr=False)
    started_at: Optional[float] = field(default=None, repr=False)
    finished_at: Optional[float] = field(default=None, repr=False)
    processing_s: float = field(default=0.0, repr=False)
    actual_cost: int = field(default=0, repr=False)
    charged_vm_delay: bool = field(default=False, repr=False)
    charged_container_delay: bool = field(default=False, repr=False)

    def __post_init__(self):
        if not self.size_mi > 0:
            raise ValueError(f"task {self.id!r}: size_mi must be > 0")

    def advance(self, new_state: TaskState) -> None:
        if _TASK_TRANSITIONS.get(self.state) is not new_state:
            raise SimulationError(
                f"task {self.workflow_id}/{self.id}: illegal transition "
                f"{self.state.value} -> {new_state.value}"
            )
        self.state = new_state

    @property
    def input_mb(self) -> float:
        return sum(d.size_mb for d in self.inputs)

    @property
    def output_mb(self) -> float:
        return sum(d.size_mb for d in self.outputs)


@dataclass(eq=False)
class WorkflowJob:
    id: str
    app_type: str
    tasks: dict[str, Task]
    budget: int
    arrival_time: float = 0.0
    size_class: str = ""
    spare_budget: int = 0
    exit_finish_time: Optional[float] = None

    @property
    def entry_tasks(self) -> list[Task]:
        return [t for t in self.tasks.values() if not t.predecessors]

    @property
    def exit_tasks(self) -> list[Task]:
        return [t for t in self.tasks.values() if not t.successors]

    def data_items(self) -> dict[str, DataItem]:
        items: dict[str, DataItem] = {}
        for t in self.tasks.values():
            for d in t.inputs:
                items.setdefault(d.id, d)
            for d in t.outputs:
                items.setdefault(d.id, d)
        return items


@dataclass(frozen=True)
class VmType:
    name: str
    cpu_mips: float
    price_cents_per_bp: int
    bandwidth_mbps: float  # megabytes per second, same unit as the storage rates
    storage_mb: float
    provisioning_delay_s: float

    def __post_init__(self):
        for attr in ("cpu_mips", "price_cents_per_bp", "bandwidth_mbps", "storage_mb"):
            if not getattr(self, attr) > 0:
                raise ValueError(f"vm type {self.name!r}: {attr} must be > 0")
        if self.provisioning_delay_s < 0:
            raise ValueError(f"vm type {self.name!r}: negative provisioning delay")


@dataclass(frozen=True)
class ContainerImage:
    id: str
    app_type: str
    init_delay_s: float

    def __post_init__(self):
        if self.init_delay_s < 0:
            raise ValueError(f"image {self.id!r}: init_delay_s must be >= 0")


@dataclass(frozen=True)
class GlobalStorage:
    read_rate_mbps: float
    write_rate_mbps: float

    def __post_init__(self):
        if not (self.read_rate_mbps > 0 and self.write_rate_mbps > 0):
            raise ValueError("global storage rates must be > 0")


@dataclass(frozen=True)
class Degradation:
    """Truncated normal performance loss, in percent of advertised capacity."""

    mean: float = 0.0
    stddev: float = 0.0
    max: float = 0.0

    def __post_init__(self):
        if not 0 <= self.max < 100:
            raise ValueError("degradation max must lie in [0, 100)")
        if self.stddev < 0:
            raise ValueError("degradation stddev must be >= 0")

    @property
    def disabled(self) -> bool:
        return self.max == 0


@dataclass(eq=False)
class Vm:
    id: int
    vm_type: VmType
    lease_start_s: float
    state: VmState = VmState.PROVISIONING
    idle_since_s: Optional[float] = None
    deployed_images: dict[str, None] = field(default_factory=dict)
    cache: "OrderedDict[str, float]" = field(default_factory=OrderedDict)
    cache_used_mb: float = 0.0
    busy_seconds_accumulated: float = 0.0
    lease_end_s: Optional[float] = None
    # scheduler bookkeeping
    owner: Optional[str] = None
    app_type: Optional[str] = None
    tasks_run: int = 0

    def cache_put(self, item: DataItem) -> list[str]:
        """Insert *item* FIFO-style; return the ids evicted to make room.

        Items already cached keep their original position. Items larger than the
        whole local storage are never cached.
        """
        if item.id in self.cache or item.size_mb > self.vm_type.storage_mb:
            return []
        evicted = []
        while self.cache_used_mb + item.size_mb > self.vm_type.storage_mb:
            old_id, old_size = self.cache.popitem(last=False)
            self.cache_used_mb -= old_size
            evicted.append(old_id)
        self.cache[item.id] = item.size_mb
        self.cache_used_mb += item.size_mb
        return evicted

    def charged_seconds(self, bp: float, now: Optional[float] = None) -> float:
        end = self.lease_end_s if self.lease_end_s is not None else now
        if end is None:
            raise SimulationError(f"vm {self.id} still leased; pass the current time")
        return billing_periods(end - self.lease_start_s, bp) * bp


@dataclass(frozen=True)
class CloudConfig:
    billing_period_s: float
    vm_catalogue: tuple[VmType, ...]
    global_storage: GlobalStorage
    container_images: tuple[ContainerImage, ...] = ()
    idle_threshold_s: float = 5.0
    provision_check_interval_s: float = 5.0
    cpu_degradation: Degradation = Degradation()
    bandwidth_degradation: Degradation = Degradation()
    default_container_delay_s: float = 10.0

    def __post_init__(self):
        if not self.billing_period_s > 0:
            raise ValueError("billing_period_s must be > 0")
        if self.idle_threshold_s < 0:
            raise ValueError("idle_threshold_s must be >= 0")
        if not self.provision_check_interval_s > 0:
            raise ValueError("provision_check_interval_s must be > 0")
        if not self.vm_catalogue:
            raise ValueError("empty vm catalogue")
        cat = tuple(sorted(self.vm_catalogue, key=lambda v: (v.cpu_mips, v.price_cents_per_bp)))
        for slow, fast in zip(cat, cat[1:]):
            if fast.cpu_mips > slow.cpu_mips and not fast.price_cents_per_bp > slow.price_cents_per_bp:
                raise ValueError(
                    f"vm type {fast.name!r} is faster than {slow.name!r} but not more expensive"
                )
        object.__setattr__(self, "vm_catalogue", cat)
        apps = [img.app_type for img in self.container_images]
        if len(apps) != len(set(apps)):
            raise ValueError("more than one container image per app type")

    @property
    def cheapest(self) -> VmType:
        return min(self.vm_catalogue, key=lambda v: (v.price_cents_per_bp, -v.cpu_mips))

    @property
    def fastest(self) -> VmType:
        return max(self.vm_catalogue, key=lambda v: (v.cpu_mips, -v.price_cents_per_bp))

    def vm_type(self, name: str) -> VmType:
        for vt in self.vm_catalogue:
            if vt.name == name:
                return vt
        raise KeyError(name)

    def image_for(self, app_type: str) -> ContainerImage:
        for img in self.container_images:
            if img.app_type == app_type:
                return img
        return ContainerImage(f"img-{app_type}", app_type, self.default_container_delay_s)

    def container_delay(self, app_type: Optional[str]) -> float:
        if app_type is None:
            return self.default_container_delay_s
        return self.image_for(app_type).init_delay_s


def billing_periods(seconds: float, bp: float) -> int:
    if seconds <= 0:
        return 0
    return math.ceil(seconds / bp - BILLING_EPS)


def _cache_of(vm) -> Iterable[str]:
    return getattr(vm, "cache", ())


def _type_of(vm) -> VmType:
    return getattr(vm, "vm_type", vm)


def input_transfer_time(items: Sequence[DataItem], vm, gs: GlobalStorage, bw_factor: float = 1.0) -> float:
    """Seconds to fetch *items* from global storage onto *vm*.

    *vm* may be a live ``Vm`` (its cache is honoured) or a bare ``VmType``
    (estimation mode: nothing is cached).
    """
    cache = _cache_of(vm)
    bw = _type_of(vm).bandwidth_mbps * bw_factor
    total = 0.0
    for d in items:
        if d.id not in cache:
            total += d.size_mb / gs.read_rate_mbps + d.size_mb / bw
    return total


def output_transfer_time(items: Sequence[DataItem], vm, gs: GlobalStorage, bw_factor: float = 1.0) -> float:
    bw = _type_of(vm).bandwidth_mbps * bw_factor
    return sum(d.size_mb / gs.write_rate_mbps + d.size_mb / bw for d in items)


def task_runtime(task: Task, vm_type: VmType, cpu_factor: float = 1.0) -> float:
    return task.size_mi / (vm_type.cpu_mips * cpu_factor)


def processing_time(task: Task, vm, gs: GlobalStorage, cpu_factor: float = 1.0, bw_factor: float = 1.0) -> float:
    """Input transfer + runtime + output transfer of *task* on *vm*.

    Passing a ``VmType`` gives the estimation-mode (no cache) maximum.
    """
    return (
        input_transfer_time(task.inputs, vm, gs, bw_factor)
        + task_runtime(task, _type_of(vm), cpu_factor)
        + output_transfer_time(task.outputs, vm, gs, bw_factor)
    )


def task_cost(
    pt_s: float,
    include_vm_delay: bool,
    include_container_delay: bool,
    vm_type: VmType,
    config: CloudConfig,
    app_type: Optional[str] = None,
) -> int:
    """Cost in cents of occupying a VM of *vm_type* for *pt_s* plus charged delays."""
    if pt_s < 0:
        raise ValueError("pt_s must be >= 0")
    occupied = pt_s
    if include_vm_delay:
        occupied += vm_type.provisioning_delay_s
    if include_container_delay:
        occupied += config.container_delay(app_type)
    return billing_periods(occupied, config.billing_period_s) * vm_type.price_cents_per_bp


def validate_dag(workflow: WorkflowJob) -> None:
    """Raise a ``ValidationError`` subclass unless *workflow* is a well-formed DAG."""
    tasks = workflow.tasks
    if not tasks:
        raise ValidationError(f"workflow {workflow.id!r} has no tasks")
    if not workflow.budget > 0:
        raise ValidationError(f"workflow {workflow.id!r}: budget must be > 0")
    for tid, t in tasks.items():
        if t.id != tid:
            raise ValidationError(f"task key {tid!r} does not match id {t.id!r}")
        for p in t.predecessors:
            if p not in tasks:
                raise DanglingEdge(f"{workflow.id}: {tid} has unknown predecessor {p!r}")
            if tid not in tasks[p].successors:
                raise DanglingEdge(f"{workflow.id}: edge {p}->{tid} missing from {p}.successors")
        for s in t.successors:
            if s not in tasks:
                raise DanglingEdge(f"{workflow.id}: {tid} has unknown successor {s!r}")
            if tid not in tasks[s].predecessors:
                raise DanglingEdge(f"{workflow.id}: edge {tid}->{s} missing from {s}.predecessors")

    indeg = {tid: len(t.predecessors) for tid, t in tasks.items()}
    frontier = [tid for tid, n in indeg.items() if n == 0]
    seen = 0
    while frontier:
        tid = frontier.pop()
        seen += 1
        for s in tasks[tid].successors:
            indeg[s] -= 1
            if indeg[s] == 0:
                frontier.append(s)
    if seen != len(tasks):
        stuck = sorted(tid for tid, n in indeg.items() if n > 0)
        raise CyclicGraph(f"{workflow.id}: cycle through {stuck[:5]}")

    for t in tasks.values():
        for d in t.outputs:
            if d.producer != t.id:
                raise OrphanDataItem(f"{workflow.id}: {t.id} lists output {d.id!r} produced by {d.producer!r}")
        for d in t.inputs:
            if d.producer is None:
                continue
            producer = tasks.get(d.producer)
            if producer is None or all(o.id != d.id for o in producer.outputs):
                raise OrphanDataItem(f"{workflow.id}: input {d.id!r} of {t.id} has no producer")
            if d.producer not in t.predecessors:
                raise OrphanDataItem(
                    f"{workflow.id}: {t.id} consumes {d.id!r} but {d.producer} is not a predecessor"
                )


def link(tasks: dict[str, Task], parent: str, child: str) -> None:
    """Add the edge parent -> child to both adjacency lists (idempotent)."""
    if child not in tasks[parent].successors:
        tasks[parent].successors.append(child)
    if parent not in tasks[child].predecessors:
        tasks[child].predecessors.append(parent)


def default_cloud(**overrides) -> CloudConfig:
    """Four compute-optimised VM types, per-second billing, 45 s / 10 s delays."""
    vm_delay = overrides.pop("vm_delay_s", 45.0)
    bandwidth = overrides.pop("bandwidth_mbps", 62.5)
    catalogue = tuple(
        VmType(name, mips, price, bandwidth, gb * 1000.0, vm_delay)
        for name, mips, gb, price in (
            ("small", 2.0, 20, 1),
            ("medium", 4.0, 40, 2),
            ("large", 8.0, 80, 4),
            ("xlarge", 16.0, 160, 8),
        )
    )
    params = dict(
        billing_period_s=1.0,
        vm_catalogue=catalogue,
        global_storage=GlobalStorage(read_rate_mbps=100.0, write_rate_mbps=80.0),
        idle_threshold_s=5.0,
        provision_check_interval_s=5.0,
        cpu_degradation=Degradation(12.0, 10.0, 24.0),
        bandwidth_degradation=Degradation(9.5, 5.0, 19.0),
        default_container_delay_s=10.0,
    )
    params.update(overrides)
    return CloudConfig(**params)
