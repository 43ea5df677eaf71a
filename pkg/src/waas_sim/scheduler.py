"""EBPSM: budget distribution, queued-task scheduling and VM reclamation.

The scheduler is a handler for :class:`waas_sim.engine.Simulator`. A sharing
policy restricts which idle VMs a task may reuse:

* ``FULL``          any idle VM, containers deployed on demand
* ``WITHIN_APP``    only VMs provisioned for the same application type
* ``NO_SHARING``    only VMs provisioned for the same workflow
* ``NO_CONTAINER``  any idle VM, software assumed present everywhere
"""
from __future__ import annotations

import bisect
import enum
import logging
import math
from typing import Optional, Sequence

import numpy as np

from .engine import Simulator
from .model import (
    BILLING_EPS,
    CloudConfig,
    SimulationError,
    Task,
    TaskState,
    Vm,
    VmState,
    VmType,
    WorkflowJob,
    billing_periods,
    input_transfer_time,
    output_transfer_time,
    processing_time,
    task_runtime,
    validate_dag,
)

log = logging.getLogger(__name__)


class InsufficientBudget(SimulationError):
    pass


class NegativeResidualBudget(SimulationError):
    pass


class SharingPolicy(enum.Enum):
    FULL = "full"
    NO_SHARING = "ns"
    WITHIN_APP = "ws"
    NO_CONTAINER = "nc"

    @classmethod
    def parse(cls, value) -> "SharingPolicy":
        if isinstance(value, cls):
            return value
        key = str(value).lower()
        for p in cls:
            if key in (p.value, p.name.lower()):
                return p
        raise ValueError(f"unknown sharing policy {value!r}")


# -- workflow preprocessing ---------------------------------------------------


def topological_order(workflow: WorkflowJob) -> list[Task]:
    tasks = workflow.tasks
    indeg = {tid: len(t.predecessors) for tid, t in tasks.items()}
    ready = [tid for tid, n in indeg.items() if n == 0]
    order = []
    i = 0
    while i < len(ready):
        t = tasks[ready[i]]
        i += 1
        order.append(t)
        for s in t.successors:
            indeg[s] -= 1
            if indeg[s] == 0:
                ready.append(s)
    if len(order) != len(tasks):
        raise SimulationError(f"workflow {workflow.id} is not acyclic")
    return order


def assign_levels(workflow: WorkflowJob) -> dict[str, int]:
    """Depth of every task: 0 for entry tasks, else 1 + deepest parent."""
    levels: dict[str, int] = {}
    for t in topological_order(workflow):
        t.level = 1 + max((levels[p] for p in t.predecessors), default=-1)
        levels[t.id] = t.level
    return levels


def estimate_eft(workflow: WorkflowJob, reference: VmType, config: CloudConfig) -> dict[str, float]:
    """Earliest finish times with estimation-mode processing times on *reference*."""
    gs = config.global_storage
    eft: dict[str, float] = {}
    for t in topological_order(workflow):
        pt = processing_time(t, reference, gs)
        eft[t.id] = max((eft[p] for p in t.predecessors), default=0.0) + pt
    return eft


def build_execution_order(workflow: WorkflowJob, eft: dict[str, float]) -> list[Task]:
    """Tasks grouped by ascending level, ascending EFT inside a level, ties by id."""
    return sorted(workflow.tasks.values(), key=lambda t: (t.level, eft[t.id], t.id))


def execution_order(workflow: WorkflowJob, config: CloudConfig) -> list[Task]:
    """Levels and EFT on the cheapest type, then :func:`build_execution_order`."""
    assign_levels(workflow)
    return build_execution_order(workflow, estimate_eft(workflow, config.cheapest, config))


def single_vm_plan(tasks: Sequence[Task], config: CloudConfig, *, containers: bool = True) -> np.ndarray:
    """Per-task cost of running *tasks* back to back on one VM of the cheapest type.

    Inputs produced by an earlier task of the plan are already local; every
    other input is read from global storage. The VM and container delays are
    charged to the first task.
    """
    vt = config.cheapest
    gs = config.global_storage
    local: set[str] = set()
    out = np.zeros(len(tasks), dtype=np.int64)
    for i, t in enumerate(tasks):
        fetched = [d for d in t.inputs if d.id not in local]
        pt = input_transfer_time(fetched, vt, gs) + task_runtime(t, vt) + output_transfer_time(t.outputs, vt, gs)
        if i == 0:
            pt += vt.provisioning_delay_s
            if containers:
                pt += config.container_delay(t.app_type)
        out[i] = billing_periods(pt, config.billing_period_s) * vt.price_cents_per_bp
        local.update(d.id for d in t.outputs)
    return out


def estimated_pt_table(tasks: Sequence[Task], config: CloudConfig) -> np.ndarray:
    """(n_tasks, n_types) worst-case processing times: no cache, no degradation."""
    gs = config.global_storage
    cat = config.vm_catalogue
    mi = np.array([t.size_mi for t in tasks], dtype=float)
    din = np.array([t.input_mb for t in tasks], dtype=float)
    dout = np.array([t.output_mb for t in tasks], dtype=float)
    mips = np.array([v.cpu_mips for v in cat])
    bw = np.array([v.bandwidth_mbps for v in cat])
    return (
        din[:, None] * (1.0 / gs.read_rate_mbps + 1.0 / bw)[None, :]
        + mi[:, None] / mips[None, :]
        + dout[:, None] * (1.0 / gs.write_rate_mbps + 1.0 / bw)[None, :]
    )


def cost_table(
    tasks: Sequence[Task],
    config: CloudConfig,
    *,
    containers: bool = True,
    delays: bool = True,
    pt: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Maximum cost in cents of each task on each catalogue type.

    Both delays are charged unless *delays* is false, which prices a reuse of
    an idle VM that already holds the container image.
    """
    if pt is None:
        pt = estimated_pt_table(tasks, config)
    cat = config.vm_catalogue
    prov = np.array([v.provisioning_delay_s for v in cat])
    price = np.array([v.price_cents_per_bp for v in cat], dtype=np.int64)
    cont = np.array([config.container_delay(t.app_type) if containers else 0.0 for t in tasks])
    if not delays:
        prov = np.zeros_like(prov)
        cont = np.zeros_like(cont)
    occupied = pt + prov[None, :] + cont[:, None]
    periods = np.ceil(occupied / config.billing_period_s - BILLING_EPS)
    periods = np.maximum(periods, 0).astype(np.int64)
    return periods * price[None, :]


def cost_floor(tasks: Sequence[Task], config: CloudConfig) -> np.ndarray:
    """Lowest possible cost of each task: inputs cached, no delays, best type."""
    gs = config.global_storage
    cat = config.vm_catalogue
    mips = np.array([vt.cpu_mips for vt in cat])
    bw = np.array([vt.bandwidth_mbps for vt in cat])
    price = np.array([vt.price_cents_per_bp for vt in cat], dtype=np.int64)
    mi = np.array([t.size_mi for t in tasks], dtype=float)
    out = np.array([t.output_mb for t in tasks], dtype=float)
    pt = mi[:, None] / mips[None, :] + out[:, None] / gs.write_rate_mbps + out[:, None] / bw[None, :]
    periods = np.maximum(np.ceil(pt / config.billing_period_s - BILLING_EPS), 0).astype(np.int64)
    return (periods * price[None, :]).min(axis=1).reshape(len(tasks))


def sftd(
    budget: int, costs: np.ndarray, reuse: Optional[np.ndarray] = None
) -> tuple[np.ndarray, np.ndarray, int]:
    """Slowest-first budget distribution over tasks already in execution order.

    ``costs[i, k]`` is the cost of task ``i`` on catalogue type ``k`` (cheapest
    type first). Every task is first priced on type 0. The leftover budget then
    upgrades tasks, earliest first, one type at a time while the next increment
    is affordable.

    When the budget cannot cover ``costs[:, 0]`` and *reuse* (the delay-free
    cheapest cost) is given, every task is priced at *reuse* first and the
    leftover lifts the earliest tasks to ``costs[:, 0]``; those tasks get
    level 0 and the rest level -1. If even that base does not fit, tasks are
    funded in order until the budget runs out; the first unfunded task gets
    the remainder and later ones get nothing.

    Returns ``(type_index, sub_budget, residual)`` where ``residual`` is the
    unallocated budget (negative only when *budget* is).
    """
    costs = np.asarray(costs, dtype=np.int64)
    if reuse is not None and costs.shape[0] and budget < int(costs[:, 0].sum()):
        pair = np.column_stack([np.asarray(reuse, dtype=np.int64), costs[:, 0]])
        level, sub, residual = sftd(budget, pair)
        return level - 1, sub, residual
    n = costs.shape[0]
    base = costs[:, 0] if n else np.zeros(0, dtype=np.int64)
    level = np.zeros(n, dtype=np.int64)
    if budget <= 0:
        return level, np.zeros(n, dtype=np.int64), int(budget)
    remaining = int(budget) - int(base.sum())
    if remaining < 0:
        cum = np.cumsum(base)
        sub = np.where(cum <= budget, base, 0)
        cut = int(np.searchsorted(cum, budget, side="right"))
        if cut < n:
            sub[cut] = int(budget) - (int(cum[cut - 1]) if cut else 0)
        return level, sub, 0
    if n == 0 or costs.shape[1] == 1:
        return level, base.copy(), remaining

    top = costs.shape[1] - 1
    inc = costs - base[:, None]
    # Step j on task i is taken iff inc[i, j] <= remaining before task i, so a
    # task climbs to the top iff every inc[i, :] fits. Full climbs form a prefix
    # that can be found without a Python loop.
    worst = inc.max(axis=1)
    full = inc[:, top]
    spent_before = np.concatenate(([0], np.cumsum(full)[:-1]))
    fails = np.flatnonzero(worst > remaining - spent_before)
    p = int(fails[0]) if fails.size else n
    level[:p] = top
    remaining -= int(full[:p].sum())

    if p < n:
        first_step = inc[p:, 1]
        suffix_min = np.minimum.accumulate(first_step[::-1])[::-1].tolist()
        rows = inc[p:].tolist()
        for off, row in enumerate(rows):
            if remaining < suffix_min[off]:
                break
            j = 0
            while j < top and row[j + 1] <= remaining:
                j += 1
            if j:
                level[p + off] = j
                remaining -= row[j]
    sub = costs[np.arange(n), level]
    return level, sub, remaining


def distribute_budget(
    budget: int,
    tasks: Sequence[Task],
    config: CloudConfig,
    *,
    containers: bool = True,
    strict: bool = False,
) -> tuple[dict[str, int], int]:
    """Sub-budget per task id plus the unallocated spare."""
    costs = cost_table(tasks, config, containers=containers)
    floor = int(costs[:, 0].sum()) if len(tasks) else 0
    if strict and budget < floor:
        raise InsufficientBudget(f"budget {budget} below cheapest pricing {floor}")
    _, sub, residual = sftd(budget, costs)
    return {t.id: int(c) for t, c in zip(tasks, sub)}, residual


# -- per-workflow budget ledger ---------------------------------------------


class BudgetLedger:
    """Sub-budgets, spare budget and spend of one workflow.

    Identity kept at every update::

        spent + in-flight sub-budgets + unscheduled sub-budgets + spare - shortfall == budget

    where *shortfall* is how far spending has already overrun the budget
    (the residual handed to redistribution went negative).
    """

    def __init__(
        self,
        workflow: WorkflowJob,
        order: Sequence[Task],
        costs: np.ndarray,
        *,
        reuse: Optional[np.ndarray] = None,
        strict: bool = False,
    ):
        self.workflow = workflow
        self.budget = int(workflow.budget)
        self.order = list(order)
        self.costs = np.asarray(costs, dtype=np.int64)
        self.reuse = None if reuse is None else np.asarray(reuse, dtype=np.int64)
        self.strict = strict
        for i, t in enumerate(self.order):
            t.index = i
        n = len(self.order)
        self.unscheduled = np.ones(n, dtype=bool)
        self.inflight = np.zeros(n, dtype=bool)
        self.sub = np.zeros(n, dtype=np.int64)
        self.n_inflight = 0
        self.spent = 0
        self.sb = 0
        self.shortfall = 0
        self.violated_in_progress = False
        self.redistributions = 0
        self.floor = int(self.costs[:, 0].sum()) if n else 0
        self._redistribute(self.budget)
        if strict and self.budget < self.floor:
            raise InsufficientBudget(
                f"workflow {workflow.id}: budget {self.budget} below cheapest pricing {self.floor}"
            )

    def _redistribute(self, beta_u: int) -> None:
        idx = np.flatnonzero(self.unscheduled)
        reuse = None if self.reuse is None else self.reuse[idx]
        _, sub, residual = sftd(beta_u, self.costs[idx], reuse)
        self.sub[idx] = sub
        if residual >= 0:
            self.sb, self.shortfall = residual, 0
        else:
            self.sb, self.shortfall = 0, -residual
        self.workflow.spare_budget = self.sb
        self.redistributions += 1

    def sub_budget(self, task: Task) -> int:
        return int(self.sub[task.index])

    def mark_scheduled(self, task: Task) -> int:
        i = task.index
        if not self.unscheduled[i]:
            raise SimulationError(f"task {task.id} scheduled twice")
        self.unscheduled[i] = False
        self.inflight[i] = True
        self.n_inflight += 1
        task.sub_budget = int(self.sub[i])
        return task.sub_budget

    def unscheduled_total(self) -> int:
        return int(self.sub[self.unscheduled].sum())

    def on_task_finished(self, task: Task, actual_cost: int) -> int:
        """Recycle the finished task's residual into the unscheduled tasks.

        Returns the budget handed to the redistribution.
        """
        i = task.index
        if not self.inflight[i]:
            raise SimulationError(f"task {task.id} finished without being scheduled")
        self.inflight[i] = False
        self.n_inflight -= 1
        sub_f = int(self.sub[i])
        self.spent += int(actual_cost)
        pool = sub_f + self.sb
        unscheduled = self.unscheduled_total()
        if actual_cost <= pool:
            spare = pool - actual_cost
            beta_u = unscheduled + spare
        else:
            debt = actual_cost - pool
            beta_u = unscheduled - debt
        beta_u -= self.shortfall
        if beta_u < 0:
            self.violated_in_progress = True
            if self.strict:
                raise NegativeResidualBudget(f"workflow {self.workflow.id}: residual budget {beta_u}")
        self._redistribute(beta_u)
        return beta_u

    def conservation_residual(self) -> int:
        held = int(self.sub[self.inflight].sum()) + self.unscheduled_total()
        return self.spent + held + self.sb - self.shortfall - self.budget


# -- the scheduler -----------------------------------------------------------


class EbpsmScheduler:
    """Event handler implementing EBPSM on top of a :class:`Simulator`."""

    def __init__(
        self,
        sim: Simulator,
        policy: SharingPolicy | str = SharingPolicy.FULL,
        *,
        strict: bool = False,
        check_ledgers: bool = False,
    ):
        self.sim = sim
        self.config = sim.config
        self.policy = SharingPolicy.parse(policy)
        self.strict = strict
        self.check_ledgers = check_ledgers
        self.catalogue = self.config.vm_catalogue
        self._type_idx = {vt: k for k, vt in enumerate(self.catalogue)}
        self._containers = self.policy is not SharingPolicy.NO_CONTAINER

        self.workflows: dict[str, WorkflowJob] = {}
        self.ledgers: dict[str, BudgetLedger] = {}
        self.completed: list[WorkflowJob] = []
        self._remaining: dict[str, int] = {}
        self._waiting_parents: dict[str, dict[str, int]] = {}
        self._wf_seq: dict[str, int] = {}
        self._costs: dict[str, np.ndarray] = {}
        self._pt: dict[str, np.ndarray] = {}
        self._floor: dict[str, list[int]] = {}
        self._queue: list[Task] = []
        # tasks waiting for their workflow's next completion
        self._parked: dict[str, list[Task]] = {}

        # idle VM indices; lists of VM ids kept sorted
        self._idle: dict[int, Vm] = {}
        self._idle_by_type: dict[tuple, list[int]] = {}
        self._idle_by_image: dict[tuple, list[int]] = {}
        self._reserved: dict[int, Task] = {}
        self._deploying: dict[int, Task] = {}
        self._owned: dict[str, list[Vm]] = {}
        # idle VMs holding inputs of tasks still to be placed this cycle
        self._wanted: dict[int, int] = {}

        self.reuse_log: list[tuple[str, str, int, str, str]] = []
        self.ledger_violations: list[tuple[str, str, int]] = []
        self.ledger_checks = 0
        self.cycles = 0
        self.deferrals = 0
        self.cycle_triggers: list[str] = []
        sim.attach(self)

    # -- policy helpers -----------------------------------------------------

    def task_key(self, task: Task):
        if self.policy is SharingPolicy.NO_SHARING:
            return task.workflow_id
        if self.policy is SharingPolicy.WITHIN_APP:
            return task.app_type
        return None

    def vm_key(self, vm: Vm):
        if self.policy is SharingPolicy.NO_SHARING:
            return vm.owner
        if self.policy is SharingPolicy.WITHIN_APP:
            return vm.app_type
        return None

    def eligible(self, task: Task, vm: Vm) -> bool:
        return vm.state is VmState.IDLE and self.vm_key(vm) == self.task_key(task)

    def has_image(self, vm: Vm, app_type: str) -> bool:
        if not self._containers:
            return True
        return self.config.image_for(app_type).id in vm.deployed_images

    # -- idle index ---------------------------------------------------------

    def _index_idle(self, vm: Vm) -> None:
        self._idle[vm.id] = vm
        key = self.vm_key(vm)
        k = self._type_idx[vm.vm_type]
        bisect.insort(self._idle_by_type.setdefault((key, k), []), vm.id)
        for img in vm.deployed_images:
            bisect.insort(self._idle_by_image.setdefault((key, img, k), []), vm.id)

    def _unindex_idle(self, vm: Vm) -> None:
        del self._idle[vm.id]
        key = self.vm_key(vm)
        k = self._type_idx[vm.vm_type]
        _remove_sorted(self._idle_by_type, (key, k), vm.id)
        for img in vm.deployed_images:
            _remove_sorted(self._idle_by_image, (key, img, k), vm.id)

    def idle_vms(self) -> list[Vm]:
        return list(self._idle.values())

    # -- event callbacks ----------------------------------------------------

    def on_workflow_arrival(self, wf: WorkflowJob) -> None:
        validate_dag(wf)
        if wf.id in self.workflows:
            raise SimulationError(f"duplicate workflow id {wf.id!r}")
        self.workflows[wf.id] = wf
        self._wf_seq[wf.id] = len(self._wf_seq)
        self._remaining[wf.id] = len(wf.tasks)
        self._waiting_parents[wf.id] = {t.id: len(t.predecessors) for t in wf.tasks.values()}

        assign_levels(wf)
        ref = self.config.cheapest
        eft = estimate_eft(wf, ref, self.config)
        order = build_execution_order(wf, eft)
        pt = estimated_pt_table(order, self.config)
        costs = cost_table(order, self.config, containers=self._containers, pt=pt)
        self._costs[wf.id] = costs
        self._pt[wf.id] = pt
        self._floor[wf.id] = cost_floor(order, self.config).tolist()
        reuse = cost_table(order, self.config, delays=False, pt=pt)[:, 0]
        self.ledgers[wf.id] = BudgetLedger(wf, order, costs, reuse=reuse, strict=self.strict)
        self._check(wf, "arrival")

        now = self.sim.clock
        for t in order:
            if not t.predecessors:
                self._make_ready(t, now)
        self.schedule_queued_tasks("arrival")

    def on_vm_provisioned(self, vm: Vm) -> None:
        task = self._reserved.pop(vm.id, None)
        if task is None:
            self._index_idle(vm)
            return
        self.sim.set_busy(vm)
        self._prepare(task, vm)

    def on_container_deployed(self, vm: Vm, image) -> None:
        task = self._deploying.pop(vm.id)
        self.sim.start_task(task, vm)

    def on_task_started(self, task: Task, vm: Vm) -> None:
        task.advance(TaskState.RUNNING)

    def on_task_finished(self, task: Task, vm: Vm) -> None:
        now = self.sim.clock
        task.advance(TaskState.COMPLETED)
        cost = self.actual_task_cost(task, vm, now - task.assigned_at)
        task.actual_cost = cost
        wf = self.workflows[task.workflow_id]
        self.ledgers[wf.id].on_task_finished(task, cost)
        self._check(wf, task.id)

        self._queue.extend(self._parked.pop(wf.id, ()))
        waiting = self._waiting_parents[wf.id]
        for cid in task.successors:
            waiting[cid] -= 1
            if waiting[cid] == 0:
                self._make_ready(wf.tasks[cid], now)

        self.sim.set_idle(vm)
        self._index_idle(vm)

        self._remaining[wf.id] -= 1
        if self._remaining[wf.id] == 0:
            wf.exit_finish_time = now
            self.completed.append(wf)
            del self._waiting_parents[wf.id]
            if self.policy is SharingPolicy.NO_SHARING:
                for owned in self._owned.pop(wf.id, []):
                    if owned.state is VmState.IDLE:
                        self._unindex_idle(owned)
                        self.sim.terminate_vm(owned)
        self.schedule_queued_tasks("completion")

    def on_provision_check(self) -> None:
        self.manage_resources()

    # -- core algorithm -----------------------------------------------------

    def _make_ready(self, task: Task, now: float) -> None:
        task.advance(TaskState.READY)
        task.ready_at = now
        task.advance(TaskState.QUEUED)
        self._queue.append(task)

    def _est_key(self, task: Task):
        wf = self.workflows[task.workflow_id]
        return (task.ready_at, wf.arrival_time, self._wf_seq[wf.id], task.index)

    def schedule_queued_tasks(self, trigger: str = "manual") -> list[tuple[Task, Vm]]:
        """Place every queued task, earliest start time first."""
        self.cycles += 1
        self.cycle_triggers.append(trigger)
        queue = sorted(self._queue, key=self._est_key)
        self._queue = []
        placed = []
        holders = [self._local_holders(t) for t in queue]
        wanted = self._wanted = {}
        for vids in holders:
            for vid in vids:
                wanted[vid] = wanted.get(vid, 0) + 1
        for task, vids in zip(queue, holders):
            for vid in vids:
                wanted[vid] -= 1
            vm = self._place(task)
            if vm is None:
                self._parked.setdefault(task.workflow_id, []).append(task)
                self.deferrals += 1
            else:
                placed.append((task, vm))
        self._wanted = {}
        return placed

    def _local_holders(self, task: Task) -> set[int]:
        """Eligible idle VMs caching one of *task*'s inputs."""
        key = self.task_key(task)
        out = set()
        for d in task.inputs:
            for vid in self.sim.data_index.get(d.id, ()):
                if vid in self._idle and self.vm_key(self.sim.vms[vid]) == key:
                    out.add(vid)
        return out

    def _evaluate(self, task: Task, vm: Vm, now: float):
        """(finish time, cost, needs deployment) of running *task* on idle *vm* now."""
        gs = self.config.global_storage
        vt = vm.vm_type
        bw = vt.bandwidth_mbps
        cache = vm.cache
        t_in = 0.0
        for d in task.inputs:
            if d.id not in cache:
                t_in += d.size_mb / gs.read_rate_mbps + d.size_mb / bw
        out = task.output_mb
        pt = t_in + task.size_mi / vt.cpu_mips + out / gs.write_rate_mbps + out / bw
        deploy = not self.has_image(vm, task.app_type)
        occupied = pt + (self.config.container_delay(task.app_type) if deploy else 0.0)
        cost = billing_periods(occupied, self.config.billing_period_s) * vt.price_cents_per_bp
        return now + occupied, cost, deploy

    def candidate_tiers(self, task: Task, now: Optional[float] = None, *, protect: bool = True):
        """Evaluated idle candidates grouped into the three reuse tiers.

        Each entry is ``(finish, vm_id, cost, needs_deploy, vm)``. Tier 1 holds
        every eligible idle VM caching one of the task's inputs; tiers 2 and 3
        hold the lowest-id VM per type with / without the container image,
        skipping (when *protect* is set) VMs that cache inputs of tasks later
        in the current cycle.
        """
        if now is None:
            now = self.sim.clock
        key = self.task_key(task)
        vms = self.sim.vms
        tier1 = []
        seen: set[int] = set()
        data_index = self.sim.data_index
        idle = self._idle
        for d in task.inputs:
            holders = data_index.get(d.id)
            if not holders:
                continue
            for vid in holders:
                if vid in seen or vid not in idle:
                    continue
                vm = vms[vid]
                if self.vm_key(vm) != key:
                    continue
                seen.add(vid)
                fin, cost, dep = self._evaluate(task, vm, now)
                tier1.append((fin, vid, cost, dep, vm))

        tier2 = []
        covered = set()
        wanted = self._wanted if protect else {}
        image = self.config.image_for(task.app_type).id if self._containers else None
        for k in range(len(self.catalogue)):
            if self._containers:
                ids = self._idle_by_image.get((key, image, k), ())
            else:
                ids = self._idle_by_type.get((key, k), ())
            for vid in ids:
                if vid not in seen and not wanted.get(vid):
                    vm = vms[vid]
                    fin, cost, dep = self._evaluate(task, vm, now)
                    tier2.append((fin, vid, cost, dep, vm))
                    covered.add(k)
                    break

        tier3 = []
        if self._containers:
            for k in range(len(self.catalogue)):
                if k in covered:
                    continue
                for vid in self._idle_by_type.get((key, k), ()):
                    if vid in seen or wanted.get(vid):
                        continue
                    vm = vms[vid]
                    if image in vm.deployed_images:
                        continue
                    fin, cost, dep = self._evaluate(task, vm, now)
                    tier3.append((fin, vid, cost, dep, vm))
                    break
        return tier1, tier2, tier3

    def new_vm_cost(self, task: Task, k: int) -> int:
        return int(self._costs[task.workflow_id][task.index, k])

    def new_vm_finish(self, task: Task, k: int, now: float) -> float:
        """Estimated finish of *task* on a fresh VM of catalogue type *k*."""
        delay = self.catalogue[k].provisioning_delay_s
        if self._containers:
            delay += self.config.container_delay(task.app_type)
        return now + delay + float(self._pt[task.workflow_id][task.index, k])

    def _place(self, task: Task) -> Optional[Vm]:
        """Pick a VM for *task*, or return None to leave it queued.

        A task whose sub-budget fits no option waits while its workflow still
        has tasks in flight: their completion frees VMs and returns spare budget.
        """
        now = self.sim.clock
        ledger = self.ledgers[task.workflow_id]
        budget = ledger.sub_budget(task)
        can_wait = ledger.n_inflight > 0
        if can_wait and budget < self._floor[task.workflow_id][task.index]:
            return None
        new_k = next((k for k in range(len(self.catalogue) - 1, -1, -1) if self.new_vm_cost(task, k) <= budget), None)
        # Cached data and images already shorten the finish estimates, so the
        # earliest in-budget finish wins and tiers only break ties. A reuse
        # must not finish later than a fresh lease of the best affordable type.
        horizon = math.inf if new_k is None else self.new_vm_finish(task, new_k, now)
        # VMs kept for later tasks' data are released when nothing else fits.
        for protect in (True, False):
            tiers = self.candidate_tiers(task, now, protect=protect)
            affordable = [(c[0], rank, c[1], c) for rank, tier in enumerate(tiers)
                          for c in tier if c[2] <= budget and c[0] <= horizon]
            if affordable:
                fin, vid, cost, dep, vm = min(affordable)[3]
                self._assign_existing(task, vm, dep)
                return vm
            if new_k is not None:
                return self._assign_new(task, self.catalogue[new_k])
            if not self._wanted:
                break
        if can_wait:
            return None

        # Nothing fits the sub-budget: stay on the cheapest type, where the
        # sub-budgets of the workflow's later tasks are priced.
        cheapest = self.catalogue[0]
        existing = [c for tier in tiers for c in tier if c[4].vm_type == cheapest]
        if existing:
            best = min(existing, key=lambda c: (c[2], c[0], c[1]))
            self._assign_existing(task, best[4], best[3])
            return best[4]
        return self._assign_new(task, cheapest)

    def _claim(self, task: Task, vm: Vm, new: bool, deploy: bool) -> None:
        task.assigned_vm = vm
        task.assigned_at = self.sim.clock
        task.charged_vm_delay = new
        task.charged_container_delay = deploy
        self.ledgers[task.workflow_id].mark_scheduled(task)

    def _assign_existing(self, task: Task, vm: Vm, deploy: bool) -> None:
        self._unindex_idle(vm)
        self.sim.set_busy(vm)
        self._claim(task, vm, False, deploy)
        self.reuse_log.append((task.workflow_id, task.id, vm.id, vm.owner or "", vm.app_type or ""))
        self._prepare(task, vm)

    def _assign_new(self, task: Task, vm_type: VmType) -> Vm:
        vm = self.sim.provision_vm(vm_type)
        vm.owner = task.workflow_id
        vm.app_type = task.app_type
        self._owned.setdefault(task.workflow_id, []).append(vm)
        self._claim(task, vm, True, self._containers)
        self._reserved[vm.id] = task
        return vm

    def _prepare(self, task: Task, vm: Vm) -> None:
        if self.has_image(vm, task.app_type):
            self.sim.start_task(task, vm)
        else:
            self._deploying[vm.id] = task
            self.sim.deploy_container(vm, self.config.image_for(task.app_type))

    def actual_task_cost(self, task: Task, vm: Vm, occupied_seconds: float) -> int:
        return billing_periods(occupied_seconds, self.config.billing_period_s) * vm.vm_type.price_cents_per_bp

    def manage_resources(self) -> list[Vm]:
        """Terminate every VM idle for at least the idle threshold."""
        now = self.sim.clock
        limit = self.config.idle_threshold_s - BILLING_EPS
        doomed = [vm for vm in self._idle.values() if now - vm.idle_since_s >= limit]
        for vm in doomed:
            self._unindex_idle(vm)
            self.sim.terminate_vm(vm)
        return doomed

    def _check(self, wf: WorkflowJob, where: str) -> None:
        if not self.check_ledgers:
            return
        self.ledger_checks += 1
        r = self.ledgers[wf.id].conservation_residual()
        if r != 0:
            self.ledger_violations.append((wf.id, where, r))


def _remove_sorted(index: dict, key, vm_id: int) -> None:
    ids = index[key]
    i = bisect.bisect_left(ids, vm_id)
    if i == len(ids) or ids[i] != vm_id:
        raise SimulationError(f"vm{vm_id} missing from idle index {key}")
    del ids[i]
    if not ids:
        del index[key]
