"""
Container start-up cost
=======================

Sweeping the container deployment delay. Every fresh VM and every image
switch pays it, so applications with many short parallel tasks slow down the
most while budgets still hold.
"""

from waas_sim import ExperimentConfig, WorkloadSpec, sweep, summarize

cfg = ExperimentConfig(workload=WorkloadSpec(count=25, arrival_rate_per_min=2.0, size_classes=("small",)),
                       seeds=(0, 1))

for delay, runs in sweep(cfg, "container_delay_s", [10, 30, 50]):
    s = summarize(runs)
    per_app = ", ".join(f"{a} {q['median']:.0f}s" for a, q in s["makespan_by_app"].items())
    print(f"delay {delay:>4.0f} s | met {s['budget_met_pct']:5.1f}% | {per_app}")
