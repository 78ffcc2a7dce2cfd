"""SLO-aware layer offloading for LLM inference on GPUs that share a host bus."""

from .analyzer import (
    PerformanceRecord,
    RecordError,
    RecordMeta,
    build_record,
    lookup_interval,
    read_record,
    write_record,
)
from .baselines import deepspeed_plan, flexgen_plan, naive_plan
from .coordinator import (
    Admit,
    Arrival,
    Coordinator,
    CoordinatorError,
    GpuContext,
    Reject,
    ServiceRequest,
    run_coordinated,
)
from .engine import (
    OffloadPlan,
    Prefetch,
    RequestShape,
    decode_latency,
    max_length,
    prefill_latency,
    run_request,
    simulate_bus,
    simulate_iteration,
)
from .harness import Scenario, build_report, compare_rows, load_scenario, run_policy
from .interval import INFEASIBLE, NO_OFFLOAD, closed_form_interval, plan_from_interval
from .profiles import (
    DECODE,
    PREFILL,
    BusSpec,
    GpuSpec,
    LatencyProfile,
    ModelSpec,
    ProfileError,
    read_profile_file,
    synth_profile,
)

__all__ = [
    "Admit", "Arrival", "BusSpec", "Coordinator", "CoordinatorError", "DECODE", "GpuContext", "GpuSpec",
    "INFEASIBLE", "LatencyProfile", "ModelSpec", "NO_OFFLOAD", "OffloadPlan", "PREFILL", "PerformanceRecord",
    "Prefetch", "ProfileError", "RecordError", "RecordMeta", "Reject", "RequestShape", "Scenario",
    "ServiceRequest", "build_record", "build_report", "closed_form_interval", "compare_rows", "decode_latency",
    "deepspeed_plan", "flexgen_plan", "load_scenario", "lookup_interval", "max_length", "naive_plan",
    "plan_from_interval", "prefill_latency", "read_profile_file", "read_record", "run_coordinated",
    "run_policy", "run_request", "simulate_bus", "simulate_iteration", "synth_profile", "write_record",
]
