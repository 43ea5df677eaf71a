"""Discrete-event simulator for budget-constrained multi-tenant workflow scheduling."""
from .engine import EventKind, RngStreams, Simulator
from .harness import ExperimentConfig, RunMetrics, emit_outputs, percentile, run_experiment, summarize, sweep
from .model import (
    CloudConfig,
    DataItem,
    Task,
    ValidationError,
    VmType,
    WorkflowJob,
    default_cloud,
    validate_dag,
)
from .scheduler import EbpsmScheduler, SharingPolicy
from .workload import (
    ParseError,
    WorkloadSpec,
    assign_budget,
    generate_workload,
    load_workflows,
    max_cost_estimate,
    min_cost_estimate,
    write_workload,
)

__version__ = "0.1.0"
