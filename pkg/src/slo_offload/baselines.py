"""Reference offloading policies to compare against.

* ``deepspeed_plan`` offloads every layer and prefetches one layer ahead.
* ``flexgen_plan`` picks one uniform host fraction statically, from a peak-FLOPS
  compute estimate and the pessimistic assumption that ``n`` GPUs split the
  bus evenly.  It never looks at a measured profile.
* ``naive_plan`` keeps everything on the GPU, or reports INFEASIBLE.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Union

from .engine import OffloadPlan, Prefetch, layer_transfer_bytes
from .interval import INFEASIBLE, NO_OFFLOAD, Marker, fits, plan_from_interval
from .profiles import DECODE, BusSpec, GpuSpec, ModelSpec, estimate_compute_time_peak

_EPS = 1e-9


def deepspeed_plan(model: ModelSpec) -> OffloadPlan:
    return OffloadPlan((1.0,) * model.num_layers, Prefetch.ONE_AHEAD, buffer_slots=2)


@dataclass(frozen=True)
class FlexgenDecision:
    portion: float
    assumed_bandwidth: float  # bytes/s, bus / n_sharing
    estimated_layer_compute_ms: float
    estimated_latency_ms: float
    budget_ms: float

    def __post_init__(self):
        if not 0.0 <= self.portion <= 1.0:
            raise ValueError("portion must lie in [0, 1]")


def portion_grid(step: float) -> list[float]:
    if not 0 < step <= 1:
        raise ValueError("portion_grid_step must be in (0, 1]")
    # exact rational steps so 0.05 * 20 lands on 1.0
    q = Fraction(step).limit_denominator(10**6)
    grid, k = [], 0
    while k * q <= 1:
        grid.append(float(k * q))
        k += 1
    if grid[-1] != 1.0:
        grid.append(1.0)
    return grid


def flexgen_estimate_ms(model: ModelSpec, gpu: GpuSpec, p: float, assumed_bandwidth: float,
                        batch: int, seq_len: int, phase: str = DECODE, kv_offload: bool = False) -> float:
    """One-ahead overlap estimate: L * max(est compute, est transfer) per iteration."""
    est_c = estimate_compute_time_peak(model, gpu, phase, batch, seq_len)
    plan = OffloadPlan((p,) * model.num_layers, Prefetch.ONE_AHEAD, kv_offload=kv_offload)
    nbytes = layer_transfer_bytes(model, plan, 1, batch, 0 if phase != DECODE else seq_len)
    est_t = nbytes / (assumed_bandwidth / 1000.0)
    return model.num_layers * max(est_c, est_t)


def flexgen_plan(
    model: ModelSpec,
    gpu: GpuSpec,
    slo_ms: float,
    batch: int,
    seq_len: int,
    bus: Union[BusSpec, float],
    n_sharing: int,
    portion_grid_step: float = 0.05,
    *,
    phase: str = DECODE,
    reference_ms: Optional[float] = None,
    kv_offload: bool = False,
) -> tuple[OffloadPlan, FlexgenDecision]:
    """Largest grid portion whose estimated latency meets the SLO.

    With ``reference_ms`` the SLO is read as a slowdown relative to that
    measured no-offload latency and rescaled onto the estimator's own
    no-offload latency, which is how a normalized SLO reaches a system that
    only knows peak-FLOPS times.
    """
    if n_sharing < 1:
        raise ValueError("n_sharing must be >= 1")
    bw = bus.bandwidth_bytes_per_s if isinstance(bus, BusSpec) else float(bus)
    assumed = bw / n_sharing
    est_c = estimate_compute_time_peak(model, gpu, phase, batch, seq_len)
    budget = slo_ms
    if reference_ms is not None:
        budget = slo_ms * model.num_layers * est_c / reference_ms
    best, best_est = 0.0, flexgen_estimate_ms(model, gpu, 0.0, assumed, batch, seq_len, phase, kv_offload)
    for p in portion_grid(portion_grid_step):
        est = flexgen_estimate_ms(model, gpu, p, assumed, batch, seq_len, phase, kv_offload)
        if est <= budget * (1 + _EPS):
            best, best_est = p, est
    plan = OffloadPlan((best,) * model.num_layers, Prefetch.ONE_AHEAD, kv_offload=kv_offload)
    return plan, FlexgenDecision(best, assumed, est_c, best_est, budget)


def naive_plan(
    model: ModelSpec,
    gpu: GpuSpec,
    batch: int,
    total_tokens: int,
    policy: Prefetch | str = Prefetch.INTERVAL_START,
) -> Union[OffloadPlan, Marker]:
    """All layers resident if they fit (buffers counted as for any plan), else INFEASIBLE."""
    if total_tokens > model.max_position_tokens * batch:
        return INFEASIBLE
    plan = plan_from_interval(model, NO_OFFLOAD, policy)
    return plan if fits(model, gpu, plan, batch, total_tokens) else INFEASIBLE
