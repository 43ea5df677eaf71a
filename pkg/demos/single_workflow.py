"""
Scheduling one workflow by hand
===============================

A four-task diamond is priced on every VM type, its budget is split across
the tasks, and the simulator runs it to completion.
"""

import numpy as np

from waas_sim import EbpsmScheduler, Simulator, default_cloud
from waas_sim.engine import EventKind
from waas_sim.model import DataItem, Degradation, Task, WorkflowJob, link
from waas_sim.scheduler import cost_table, execution_order

# Switch off performance variation so estimates and actual costs agree.
cloud = default_cloud(cpu_degradation=Degradation(), bandwidth_degradation=Degradation())

# Build the diamond: split -> (left, right) -> join.
tasks = {tid: Task(tid, "demo", mi, "montage") for tid, mi in
         [("split", 120.0), ("left", 400.0), ("right", 250.0), ("join", 80.0)]}
tasks["split"].inputs.append(DataItem("survey.fits", 300.0))
for tid in ("split", "left", "right"):
    tasks[tid].outputs.append(DataItem(f"demo/{tid}.out", 40.0, tid))
for parent, child in [("split", "left"), ("split", "right"), ("left", "join"), ("right", "join")]:
    link(tasks, parent, child)
    tasks[child].inputs.extend(tasks[parent].outputs)
wf = WorkflowJob("demo", "montage", tasks, budget=1200)

# Worst-case cost of each task on each type, rows in execution order.
order = execution_order(wf, cloud)
costs = cost_table(order, cloud)
print("execution order:", [t.id for t in order])
print("cost table (cents), columns", [vt.name for vt in cloud.vm_catalogue])
print(costs)

# Run it.
sim = Simulator(cloud, seed=0)
sched = EbpsmScheduler(sim, "full")
sim.schedule_event(0.0, EventKind.WORKFLOW_ARRIVAL, wf)
sim.run_until_idle()

for t in order:
    print(f"{t.id:>6}: {t.assigned_vm.vm_type.name:>7} vm{t.assigned_vm.id}"
          f"  start {t.started_at:7.1f}  finish {t.finished_at:7.1f}  cost {t.actual_cost}")
spent = sum(t.actual_cost for t in tasks.values())
print(f"makespan {wf.exit_finish_time:.1f} s, spent {spent} of {wf.budget} cents")
print("utilization of each VM:",
      np.round([vm.busy_seconds_accumulated / vm.charged_seconds(1.0) for vm in sim.vms.values()], 3))
