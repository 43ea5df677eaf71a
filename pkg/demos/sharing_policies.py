"""
How much does VM sharing help?
==============================

The same bursty workload runs under each sharing policy. Data-intensive
applications gain the most from reusing VMs whose caches already hold their
inputs.
"""

from waas_sim import ExperimentConfig, WorkloadSpec, run_experiment, summarize

workload = WorkloadSpec(count=30, arrival_rate_per_min=12.0, size_classes=("small", "medium"))

summaries = {}
for policy in ("full", "ws", "ns", "nc"):
    cfg = ExperimentConfig(workload=workload, policy=policy, seeds=(0, 1))
    summaries[policy] = summarize(run_experiment(cfg))

apps = sorted(summaries["full"]["makespan_by_app"])
print(f"{'policy':<8}{'met %':>8}{'util':>8}" + "".join(f"{a:>12}" for a in apps))
for policy, s in summaries.items():
    medians = "".join(f"{s['makespan_by_app'][a]['median']:>12.0f}" for a in apps)
    print(f"{policy:<8}{s['budget_met_pct']:>8.1f}{s['avg_vm_utilization']:>8.3f}{medians}")

# Fewer, busier VMs under full sharing.
for policy, s in summaries.items():
    print(policy, "VMs leased:", sum(s["vm_count_by_type"].values()))
