"""Deterministic discrete-event kernel.

The :class:`Simulator` owns the clock, the event heap, the seeded random
streams and every VM. Decisions are delegated to a handler object (normally
:class:`waas_sim.scheduler.EbpsmScheduler`) which receives one callback per
event kind.
"""
from __future__ import annotations

import enum
import heapq
import zlib
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .model import (
    CloudConfig,
    ContainerImage,
    DataItem,
    Degradation,
    SimulationError,
    Task,
    Vm,
    VmState,
    VmType,
)


class PastEvent(SimulationError):
    pass


class LivelockGuard(SimulationError):
    pass


class UnknownVmType(SimulationError):
    pass


class VmStateError(SimulationError):
    pass


class VmBusy(VmStateError):
    pass


class InvalidState(VmStateError):
    pass


class AlreadyDeployed(SimulationError):
    pass


class EventKind(enum.IntEnum):
    WORKFLOW_ARRIVAL = 0
    VM_PROVISIONED = 1
    CONTAINER_DEPLOYED = 2
    TASK_STARTED = 3
    TASK_FINISHED = 4
    PROVISION_CHECK = 5


@dataclass(order=True, frozen=True)
class Event:
    time_s: float
    seq: int
    kind: EventKind = field(compare=False)
    subjects: tuple = field(compare=False, default=())


def _subject_id(obj: Any) -> str:
    if isinstance(obj, Task):
        return f"{obj.workflow_id}/{obj.id}"
    if isinstance(obj, Vm):
        return f"vm{obj.id}"
    if isinstance(obj, ContainerImage):
        return obj.id
    return str(getattr(obj, "id", obj))


STREAM_NAMES = ("arrivals", "workload_shape", "budgets", "cpu_degradation", "bandwidth_degradation")


class RngStreams:
    """Independent named numpy generators derived from one master seed.

    Each name maps to a fixed spawn key, so the draws of one stream never depend
    on how often the others were used.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def _key(self, name: str) -> int:
        if name in STREAM_NAMES:
            return STREAM_NAMES.index(name)
        return 1000 + zlib.crc32(name.encode())

    def __getitem__(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=(self._key(name),))
            gen = self._streams[name] = np.random.Generator(np.random.PCG64(ss))
        return gen


class _FactorSampler:
    """Buffered draws of ``1 - clip(N(mean, sd), 0, max) / 100``."""

    def __init__(self, spec: Degradation, gen: np.random.Generator, batch: int = 4096):
        self.spec = spec
        self.gen = gen
        self.batch = batch
        self._buf: list[float] = []

    def __call__(self) -> float:
        if self.spec.disabled:
            return 1.0
        if not self._buf:
            raw = self.gen.normal(self.spec.mean, self.spec.stddev, self.batch)
            factors = 1.0 - np.clip(raw, 0.0, self.spec.max) / 100.0
            self._buf = factors[::-1].tolist()
        return self._buf.pop()


class Simulator:
    def __init__(
        self,
        config: CloudConfig,
        seed: int = 0,
        *,
        trace: bool = False,
        max_events: int = 50_000_000,
    ):
        self.config = config
        self.rng = RngStreams(seed)
        self.clock = 0.0
        self.max_events = max_events
        self.dispatched = 0
        self._heap: list[Event] = []
        self._seq = 0
        self._check_pending = False
        self.trace_lines: Optional[list[str]] = [] if trace else None
        self.handler = None

        self.vms: dict[int, Vm] = {}
        self.leased: dict[int, Vm] = {}
        # data id -> VMs whose local cache holds it (dict used as an ordered set)
        self.data_index: dict[str, dict[int, None]] = {}
        self._pending_images: set[tuple[int, str]] = set()

        self._cpu = _FactorSampler(config.cpu_degradation, self.rng["cpu_degradation"])
        self._bw = _FactorSampler(config.bandwidth_degradation, self.rng["bandwidth_degradation"])

    def attach(self, handler) -> None:
        self.handler = handler

    # -- event queue -------------------------------------------------------

    def schedule_event(self, time_s: float, kind: EventKind, *subjects) -> Event:
        if time_s < self.clock:
            raise PastEvent(f"event {kind.name} at {time_s} is before clock {self.clock}")
        ev = Event(time_s, self._seq, kind, subjects)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def pending(self) -> int:
        return len(self._heap)

    def step(self) -> Event:
        ev = heapq.heappop(self._heap)
        self.clock = ev.time_s
        self.dispatched += 1
        if self.dispatched > self.max_events:
            raise LivelockGuard(f"more than {self.max_events} events dispatched")
        if self.trace_lines is not None:
            ids = ",".join(_subject_id(s) for s in ev.subjects)
            self.trace_lines.append(f"{ev.time_s:.6f}\t{ev.seq}\t{ev.kind.name}\t{ids}")
        self._dispatch(ev)
        return ev

    def run_until_idle(self) -> float:
        while self._heap:
            self.step()
        if self.leased:
            raise SimulationError(f"{len(self.leased)} VMs still leased with an empty event queue")
        return self.clock

    def _dispatch(self, ev: Event) -> None:
        kind = ev.kind
        h = self.handler
        if kind is EventKind.TASK_FINISHED:
            task, vm = ev.subjects
            self._finish_task(task, vm)
            if h is not None:
                h.on_task_finished(task, vm)
        elif kind is EventKind.TASK_STARTED:
            task, vm = ev.subjects
            self._start_task(task, vm)
            if h is not None:
                h.on_task_started(task, vm)
        elif kind is EventKind.VM_PROVISIONED:
            (vm,) = ev.subjects
            if vm.state is not VmState.PROVISIONING:
                raise InvalidState(f"vm{vm.id} provisioned twice")
            vm.state = VmState.IDLE
            vm.idle_since_s = self.clock
            if h is not None:
                h.on_vm_provisioned(vm)
        elif kind is EventKind.CONTAINER_DEPLOYED:
            vm, image = ev.subjects
            self._pending_images.discard((vm.id, image.id))
            if vm.state is not VmState.TERMINATED:
                vm.deployed_images[image.id] = None
            if h is not None:
                h.on_container_deployed(vm, image)
        elif kind is EventKind.WORKFLOW_ARRIVAL:
            if h is not None:
                h.on_workflow_arrival(ev.subjects[0])
        elif kind is EventKind.PROVISION_CHECK:
            self._check_pending = False
            if h is not None:
                h.on_provision_check()
            if self.leased:
                self._ensure_check()
        else:  # pragma: no cover
            raise SimulationError(f"unknown event kind {kind!r}")

    def _ensure_check(self) -> None:
        if not self._check_pending:
            self._check_pending = True
            self.schedule_event(self.clock + self.config.provision_check_interval_s, EventKind.PROVISION_CHECK)

    def write_trace(self, path) -> None:
        if self.trace_lines is None:
            raise SimulationError("tracing was not enabled for this simulator")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("time_s\tseq\tkind\tsubjects\n")
            for line in self.trace_lines:
                fh.write(line + "\n")

    # -- performance variation --------------------------------------------

    def sample_cpu_factor(self) -> float:
        return self._cpu()

    def sample_bandwidth_factor(self) -> float:
        return self._bw()

    # -- VM lifecycle -------------------------------------------------------

    def provision_vm(self, vm_type: VmType) -> Vm:
        if vm_type not in self.config.vm_catalogue:
            raise UnknownVmType(getattr(vm_type, "name", vm_type))
        vm = Vm(id=len(self.vms), vm_type=vm_type, lease_start_s=self.clock)
        self.vms[vm.id] = vm
        self.leased[vm.id] = vm
        self.schedule_event(self.clock + vm_type.provisioning_delay_s, EventKind.VM_PROVISIONED, vm)
        self._ensure_check()
        return vm

    def terminate_vm(self, vm: Vm) -> None:
        if vm.state is VmState.BUSY:
            raise VmBusy(f"vm{vm.id} is running a task")
        if vm.state is not VmState.IDLE:
            raise InvalidState(f"vm{vm.id} is {vm.state.value}")
        vm.state = VmState.TERMINATED
        vm.idle_since_s = None
        vm.lease_end_s = self.clock
        for data_id in vm.cache:
            holders = self.data_index.get(data_id)
            if holders is not None:
                holders.pop(vm.id, None)
                if not holders:
                    del self.data_index[data_id]
        vm.cache.clear()
        vm.cache_used_mb = 0.0
        del self.leased[vm.id]

    def deploy_container(self, vm: Vm, image: ContainerImage) -> float:
        """Start deploying *image* on *vm*; return the time it becomes usable."""
        if vm.state not in (VmState.IDLE, VmState.BUSY):
            raise InvalidState(f"cannot deploy on vm{vm.id} while {vm.state.value}")
        if image.id in vm.deployed_images or (vm.id, image.id) in self._pending_images:
            raise AlreadyDeployed(f"{image.id} already on vm{vm.id}")
        self._pending_images.add((vm.id, image.id))
        ready = self.clock + image.init_delay_s
        self.schedule_event(ready, EventKind.CONTAINER_DEPLOYED, vm, image)
        return ready

    def set_busy(self, vm: Vm) -> None:
        if vm.state is not VmState.IDLE:
            raise InvalidState(f"vm{vm.id} is {vm.state.value}, expected idle")
        vm.state = VmState.BUSY
        vm.idle_since_s = None

    def set_idle(self, vm: Vm) -> None:
        if vm.state is not VmState.BUSY:
            raise InvalidState(f"vm{vm.id} is {vm.state.value}, expected busy")
        vm.state = VmState.IDLE
        vm.idle_since_s = self.clock

    def cache_put(self, vm: Vm, item: DataItem) -> None:
        evicted = vm.cache_put(item)
        for data_id in evicted:
            holders = self.data_index[data_id]
            del holders[vm.id]
            if not holders:
                del self.data_index[data_id]
        if item.id in vm.cache:
            self.data_index.setdefault(item.id, {})[vm.id] = None

    # -- task execution -----------------------------------------------------

    def start_task(self, task: Task, vm: Vm) -> Event:
        """Queue the TaskStarted event for *task* on the (busy) *vm* at the current time."""
        if vm.state is not VmState.BUSY:
            raise InvalidState(f"vm{vm.id} must be reserved before starting a task")
        return self.schedule_event(self.clock, EventKind.TASK_STARTED, task, vm)

    def _start_task(self, task: Task, vm: Vm) -> None:
        gs = self.config.global_storage
        vt = vm.vm_type
        cache = vm.cache
        missing = [d for d in task.inputs if d.id not in cache]
        t_in = 0.0
        if missing:
            bw = vt.bandwidth_mbps * self.sample_bandwidth_factor()
            for d in missing:
                t_in += d.size_mb / gs.read_rate_mbps + d.size_mb / bw
        runtime = task.size_mi / (vt.cpu_mips * self.sample_cpu_factor())
        t_out = 0.0
        if task.outputs:
            bw = vt.bandwidth_mbps * self.sample_bandwidth_factor()
            for d in task.outputs:
                t_out += d.size_mb / gs.write_rate_mbps + d.size_mb / bw
        for d in missing:
            self.cache_put(vm, d)
        task.started_at = self.clock
        task.processing_s = t_in + runtime + t_out
        self.schedule_event(self.clock + task.processing_s, EventKind.TASK_FINISHED, task, vm)

    def _finish_task(self, task: Task, vm: Vm) -> None:
        for d in task.outputs:
            self.cache_put(vm, d)
        vm.busy_seconds_accumulated += task.processing_s
        vm.tasks_run += 1
        task.finished_at = self.clock


def charged_cents(vm: Vm, bp: float) -> int:
    return int(round(vm.charged_seconds(bp) / bp)) * vm.vm_type.price_cents_per_bp


__all__ = [
    "AlreadyDeployed",
    "Event",
    "EventKind",
    "InvalidState",
    "LivelockGuard",
    "PastEvent",
    "RngStreams",
    "Simulator",
    "UnknownVmType",
    "VmBusy",
    "VmStateError",
    "charged_cents",
]
