from __future__ import annotations

import pytest

from waas_sim.engine import EventKind, Simulator
from waas_sim.model import (
    CloudConfig,
    DataItem,
    Degradation,
    GlobalStorage,
    Task,
    VmType,
    WorkflowJob,
    default_cloud,
    link,
)

OFF = Degradation(0.0, 0.0, 0.0)


def quiet_cloud(**overrides) -> CloudConfig:
    """Default catalogue with degradation switched off."""
    overrides.setdefault("cpu_degradation", OFF)
    overrides.setdefault("bandwidth_degradation", OFF)
    return default_cloud(**overrides)


def two_type_cloud(**overrides) -> CloudConfig:
    """1 MIPS @ 1 c/s and 2 MIPS @ 3 c/s, no delays, bp 1 s."""
    params = dict(
        billing_period_s=1.0,
        vm_catalogue=(
            VmType("slow", 1.0, 1, 25.0, 10_000.0, 0.0),
            VmType("fast", 2.0, 3, 25.0, 10_000.0, 0.0),
        ),
        global_storage=GlobalStorage(50.0, 50.0),
        default_container_delay_s=0.0,
        cpu_degradation=OFF,
        bandwidth_degradation=OFF,
    )
    params.update(overrides)
    return CloudConfig(**params)


def make_workflow(
    wf_id: str,
    sizes: dict[str, float],
    edges=(),
    *,
    app: str = "app",
    budget: int = 1000,
    arrival: float = 0.0,
    inputs: dict | None = None,
    outputs: dict | None = None,
) -> WorkflowJob:
    """Small hand-built workflow. ``outputs`` maps task -> list of sizes (MB);
    each child of a producer consumes all of its outputs. ``inputs`` maps task
    -> list of external ``DataItem``s."""
    tasks = {tid: Task(tid, wf_id, float(mi), app) for tid, mi in sizes.items()}
    for tid, out_sizes in (outputs or {}).items():
        for k, s in enumerate(out_sizes):
            tasks[tid].outputs.append(DataItem(f"{wf_id}/{tid}/o{k}", float(s), tid))
    for p, c in edges:
        link(tasks, p, c)
        tasks[c].inputs.extend(tasks[p].outputs)
    for tid, items in (inputs or {}).items():
        tasks[tid].inputs.extend(items)
    return WorkflowJob(wf_id, app, tasks, budget, arrival)


def settle(sim: Simulator) -> None:
    """Dispatch every event due at the current clock (ProvisionChecks excluded)."""
    while sim._heap and sim._heap[0].time_s <= sim.clock and sim._heap[0].kind is not EventKind.PROVISION_CHECK:
        sim.step()


def advance_to(sim: Simulator, t: float) -> None:
    while sim._heap and sim._heap[0].time_s <= t:
        sim.step()
    sim.clock = max(sim.clock, t)


@pytest.fixture
def cloud():
    return quiet_cloud()


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion, printed at session end."""

    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
