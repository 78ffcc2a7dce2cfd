"""Offloading intervals: plans, memory-feasible bounds and the closed-form estimate.

An interval ``i`` offloads the last layer of every run of ``i`` consecutive
layers, i.e. layers ``i, 2i, ..., floor(L/i)*i``.  A trailing partial run keeps
all its layers resident.  ``NO_OFFLOAD`` keeps the whole model resident and
ranks above every finite interval; ``INFEASIBLE`` marks "no interval works".
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Union

from .engine import OffloadPlan, Prefetch, gpu_memory_usage
from .profiles import GpuSpec, ModelSpec


class Marker(enum.Enum):
    NO_OFFLOAD = "none"
    INFEASIBLE = "infeasible"

    def __repr__(self):
        return self.name


NO_OFFLOAD = Marker.NO_OFFLOAD
INFEASIBLE = Marker.INFEASIBLE

Interval = Union[int, Marker]


def interval_rank(i: Interval) -> float:
    """Sort key where a larger rank means less offloading."""
    if i is NO_OFFLOAD:
        return math.inf
    if i is INFEASIBLE:
        raise ValueError("INFEASIBLE has no rank")
    return float(i)


def check_interval(i: Interval, num_layers: int) -> None:
    if i is NO_OFFLOAD:
        return
    if isinstance(i, bool) or not isinstance(i, int) or not 1 <= i <= num_layers:
        raise ValueError(f"interval must be in [1, {num_layers}] or NO_OFFLOAD, got {i!r}")


def offloaded_layers(num_layers: int, i: Interval) -> tuple[int, ...]:
    check_interval(i, num_layers)
    if i is NO_OFFLOAD:
        return ()
    return tuple(range(i, (num_layers // i) * i + 1, i))


def plan_from_interval(
    model: ModelSpec,
    i: Interval,
    policy: Prefetch | str = Prefetch.INTERVAL_START,
    kv_offload: bool = False,
    *,
    buffer_slots: Optional[int] = None,
    writeback_counted: bool = False,
) -> OffloadPlan:
    off = set(offloaded_layers(model.num_layers, i))
    fractions = tuple(1.0 if j in off else 0.0 for j in range(1, model.num_layers + 1))
    return OffloadPlan(fractions, Prefetch(policy), buffer_slots, kv_offload, writeback_counted)


def candidate_intervals(num_layers: int) -> list[Interval]:
    return [*range(1, num_layers + 1), NO_OFFLOAD]


def fits(model: ModelSpec, gpu: GpuSpec, plan: OffloadPlan, batch: int, total_tokens: int) -> bool:
    return gpu_memory_usage(model, gpu, plan, batch, total_tokens) <= gpu.mem_capacity_bytes


def max_feasible_interval(
    model: ModelSpec,
    gpu: GpuSpec,
    batch: int,
    total_tokens: int,
    policy: Prefetch | str = Prefetch.INTERVAL_START,
    kv_offload: bool = False,
    *,
    buffer_slots: Optional[int] = None,
) -> Interval:
    """Largest interval whose footprint fits; NO_OFFLOAD if the whole model fits."""
    for i in reversed(candidate_intervals(model.num_layers)):
        plan = plan_from_interval(model, i, policy, kv_offload, buffer_slots=buffer_slots)
        if fits(model, gpu, plan, batch, total_tokens):
            return i
    return INFEASIBLE


@dataclass(frozen=True)
class ClosedFormInputs:
    iter_compute_ms: float  # whole-iteration compute time without offloading
    layer_transfer_ms: float
    slo_ms: float
    num_layers: int

    @property
    def delta(self) -> float:
        """SLO headroom over the no-offload iteration time."""
        return self.slo_ms / self.iter_compute_ms - 1.0

    @property
    def l_offload(self) -> int:
        """Most layers whose transfers fit inside the SLO budget."""
        if self.layer_transfer_ms <= 0:
            raise ValueError("layer_transfer_ms must be > 0")
        # iter_compute * (1 + delta) is the SLO itself; divide it directly to avoid rounding drift
        return max(0, math.floor(self.slo_ms / self.layer_transfer_ms))


def closed_form_interval(inputs: ClosedFormInputs) -> Interval:
    n = inputs.l_offload
    if inputs.slo_ms < inputs.iter_compute_ms or n == 0:
        return INFEASIBLE
    return min(inputs.num_layers, max(1, inputs.num_layers // n))
