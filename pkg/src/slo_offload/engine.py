"""Dual-stream timeline simulator for layer-wise offloaded inference.

One GPU instance owns a compute stream (layers run serially, in order) and a
copy stream (host-to-device prefetches run serially, in layer order).  Several
instances may share a bus: at any instant the ``k`` active transfers each
progress at ``bandwidth / k`` (fluid sharing).  All times are milliseconds,
sizes are bytes.  Layer numbers in plans and traces are 1-based.
"""

from __future__ import annotations

import copy
import enum
import functools
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

from .profiles import DECODE, PREFILL, BusSpec, GpuSpec, LatencyProfile, ModelSpec, lookup_compute_time

STEADY_WINDOW = 16


class Prefetch(str, enum.Enum):
    """When the prefetch of an offloaded layer may begin.

    INTERVAL_START  at the compute start of the first layer of the layer's interval
    EAGER           as soon as a buffer slot is free, across iteration boundaries
    ONE_AHEAD       at the compute start of the preceding layer
    """

    INTERVAL_START = "interval_start"
    EAGER = "eager"
    ONE_AHEAD = "one_ahead"


DEFAULT_BUFFER_SLOTS = {Prefetch.INTERVAL_START: 1, Prefetch.EAGER: 2, Prefetch.ONE_AHEAD: 2}


class PlanError(ValueError):
    pass


class InfeasibleError(ValueError):
    """The requested configuration cannot fit in GPU memory."""


@dataclass(frozen=True)
class OffloadPlan:
    host_fraction: tuple[float, ...]
    prefetch: Prefetch = Prefetch.INTERVAL_START
    buffer_slots: Optional[int] = None
    kv_offload: bool = False
    writeback_counted: bool = False

    def __post_init__(self):
        object.__setattr__(self, "host_fraction", tuple(float(f) for f in self.host_fraction))
        object.__setattr__(self, "prefetch", Prefetch(self.prefetch))
        if self.buffer_slots is None:
            object.__setattr__(self, "buffer_slots", DEFAULT_BUFFER_SLOTS[self.prefetch])
        if self.buffer_slots < 1:
            raise PlanError("buffer_slots must be >= 1")
        if any(not 0.0 <= f <= 1.0 for f in self.host_fraction):
            raise PlanError("host fractions must lie in [0, 1]")
        if self.prefetch is not Prefetch.ONE_AHEAD and any(f not in (0.0, 1.0) for f in self.host_fraction):
            raise PlanError(f"{self.prefetch.value} plans take whole layers only")

    @classmethod
    def resident(cls, num_layers: int, **kwargs) -> "OffloadPlan":
        return cls((0.0,) * num_layers, **kwargs)

    @property
    def num_layers(self) -> int:
        return len(self.host_fraction)

    @functools.cached_property
    def offloaded_layers(self) -> tuple[int, ...]:
        return tuple(j + 1 for j, f in enumerate(self.host_fraction) if f > 0)

    @functools.cached_property
    def prefetch_anchor(self) -> dict[int, int]:
        """Offloaded layer -> layer whose compute start releases its prefetch (0: iteration start)."""
        anchors, prev = {}, 0
        for m in self.offloaded_layers:
            if self.prefetch is Prefetch.INTERVAL_START:
                anchors[m] = min(prev + 1, m - 1)
            else:
                anchors[m] = m - 1
            prev = m
        return anchors

    def fraction(self, layer: int) -> float:
        return self.host_fraction[layer - 1]

    def check_model(self, model: ModelSpec) -> None:
        if self.num_layers != model.num_layers:
            raise PlanError(f"plan covers {self.num_layers} layers, model has {model.num_layers}")


# -- transfer and memory accounting ----------------------------------------------


def layer_transfer_bytes(model: ModelSpec, plan: OffloadPlan, layer: int, batch: int, context_tokens: int) -> int:
    """Bytes moved host-to-device to make ``layer`` resident for one iteration."""
    f = plan.fraction(layer)
    if f == 0:
        return 0
    unit = model.layer_weight_bytes
    if plan.kv_offload:
        unit += model.kv_bytes_per_token_per_layer * batch * context_tokens
    return int(round(f * unit))


def iteration_transfer_bytes(model: ModelSpec, plan: OffloadPlan, batch: int, context_tokens: int) -> int:
    total = sum(layer_transfer_bytes(model, plan, j, batch, context_tokens) for j in plan.offloaded_layers)
    return 2 * total if plan.writeback_counted else total


def consumed_bandwidth(model: ModelSpec, plan: OffloadPlan, slo_ms: float, batch: int, seq_len: int) -> float:
    """Average bus rate (bytes/s) needed to move one iteration's bytes per SLO period."""
    if slo_ms <= 0:
        raise ValueError("slo_ms must be > 0")
    return iteration_transfer_bytes(model, plan, batch, seq_len) * 1000.0 / slo_ms


def host_memory_bytes(model: ModelSpec, plan: OffloadPlan, total_tokens: int = 0) -> int:
    weights = sum(f * model.layer_weight_bytes for f in plan.host_fraction)
    kv = 0.0
    if plan.kv_offload:
        kv = sum(plan.host_fraction) * model.kv_bytes_per_token_per_layer * total_tokens
    return int(round(weights + kv))


def gpu_memory_usage(model: ModelSpec, gpu: GpuSpec, plan: OffloadPlan, batch: int, total_tokens: int) -> int:
    """Resident bytes: kept weights, prefetch buffers, workspace and resident KV.

    ``total_tokens`` is the whole batch's token budget, batch * (seq + out).
    """
    if total_tokens > model.max_position_tokens * batch:
        raise ValueError("total_tokens exceeds the model's position limit")
    w = model.layer_weight_bytes
    kv = model.kv_bytes_per_token_per_layer
    resident_weights = sum((1.0 - f) * w for f in plan.host_fraction)
    slot_unit = w + (kv * total_tokens if plan.kv_offload else 0)
    if plan.kv_offload:
        kv_layers = sum(1.0 - f for f in plan.host_fraction)
    else:
        kv_layers = plan.num_layers
    total = resident_weights + plan.buffer_slots * slot_unit + gpu.workspace_bytes + kv * total_tokens * kv_layers
    return int(round(total))


def max_length(model: ModelSpec, gpu: GpuSpec, plan: OffloadPlan, batch: int) -> int:
    """Largest token budget batch * (seq + out) whose footprint fits the GPU."""
    cap = gpu.mem_capacity_bytes
    base = gpu_memory_usage(model, gpu, plan, batch, 0)
    if base > cap:
        raise InfeasibleError("plan does not fit even with no tokens")
    limit = model.max_position_tokens * batch
    per_token = gpu_memory_usage(model, gpu, plan, batch, 1) - base
    if per_token <= 0:
        return limit
    t = min(limit, (cap - base) // per_token)
    # rounding guard for fractional plans
    while t > 0 and gpu_memory_usage(model, gpu, plan, batch, t) > cap:
        t -= 1
    while t < limit and gpu_memory_usage(model, gpu, plan, batch, t + 1) <= cap:
        t += 1
    return t


# -- bandwidth over time -------------------------------------------------------


@dataclass(frozen=True)
class BandwidthSchedule:
    """Piecewise-constant bus bandwidth: ``points`` are ``(from_ms, bytes_per_s)``."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple(sorted((float(t), float(bw)) for t, bw in self.points))
        if not pts or pts[0][0] > 0:
            raise ValueError("schedule must start at or before t=0")
        if any(bw <= 0 for _, bw in pts):
            raise ValueError("bandwidth must be positive")
        object.__setattr__(self, "points", pts)

    @classmethod
    def constant(cls, bytes_per_s: float) -> "BandwidthSchedule":
        return cls(((0.0, bytes_per_s),))

    def __call__(self, t_ms: float) -> float:
        bw = self.points[0][1]
        for start, value in self.points:
            if start <= t_ms:
                bw = value
            else:
                break
        return bw

    def next_change(self, t_ms: float) -> float:
        for start, _ in self.points:
            if start > t_ms:
                return start
        return math.inf


BandwidthLike = Union[float, int, BusSpec, BandwidthSchedule]


def as_schedule(bw: BandwidthLike) -> BandwidthSchedule:
    if isinstance(bw, BandwidthSchedule):
        return bw
    if isinstance(bw, BusSpec):
        return BandwidthSchedule.constant(bw.bandwidth_bytes_per_s)
    return BandwidthSchedule.constant(float(bw))


# -- traces ----------------------------------------------------------------------


@dataclass(frozen=True)
class TraceEvent:
    stream: str  # "compute" | "copy"
    layer: int
    kind: str  # "compute" | "prefetch" | "writeback"
    start_ms: float
    end_ms: float

    def to_dict(self) -> dict:
        return {"stream": self.stream, "layer": self.layer, "kind": self.kind,
                "start_ms": self.start_ms, "end_ms": self.end_ms}


@dataclass(frozen=True)
class IterationTrace:
    index: int
    phase: str
    start_ms: float
    end_ms: float
    events: tuple[TraceEvent, ...]
    plan: OffloadPlan = field(repr=False, compare=False)
    label: object = None  # caller tag, e.g. the interval in force

    @property
    def duration_ms(self) -> float:
        return self.end_ms - self.start_ms

    def copy_bytes(self) -> int:
        return sum(e.nbytes for e in self.events if isinstance(e, _SizedEvent))

    def check(self) -> None:
        """Raise AssertionError if a trace invariant is broken."""
        for stream in ("compute", "copy"):
            evs = sorted((e for e in self.events if e.stream == stream), key=lambda e: (e.start_ms, e.end_ms))
            for a, b in zip(evs, evs[1:]):
                assert b.start_ms >= a.end_ms, f"{stream} overlap: {a} / {b}"
        comp = {e.layer: e for e in self.events if e.kind == "compute"}
        for j in range(2, len(comp) + 1):
            assert comp[j].start_ms >= comp[j - 1].end_ms, f"layer {j} starts before layer {j - 1} ends"
        for e in self.events:
            if e.kind == "prefetch":
                assert comp[e.layer].start_ms >= e.end_ms, f"layer {e.layer} computed before its prefetch landed"


@dataclass(frozen=True)
class _SizedEvent(TraceEvent):
    nbytes: int = 0


def write_trace(path: str | Path, traces: Iterable[IterationTrace]) -> None:
    events = [e.to_dict() for t in traces for e in sorted(t.events, key=lambda e: (e.start_ms, e.stream, e.layer))]
    with open(path, "w") as fh:
        json.dump(events, fh, indent=1)
        fh.write("\n")


# -- simulation core ---------------------------------------------------------------


@dataclass
class IterationSpec:
    phase: str
    batch: int
    context_tokens: int
    plan: OffloadPlan
    compute_ms: float
    label: object = None


@dataclass
class _Iteration:
    index: int
    spec: IterationSpec
    start_ms: Optional[float] = None
    end_ms: Optional[float] = None
    compute_start: dict = field(default_factory=dict)
    ready: dict = field(default_factory=dict)
    events: list = field(default_factory=list)

    def trace(self) -> IterationTrace:
        return IterationTrace(self.index, self.spec.phase, self.start_ms, self.end_ms,
                              tuple(self.events), self.spec.plan, self.spec.label)


@dataclass
class _Job:
    kind: str
    it: _Iteration
    layer: int
    nbytes: int
    remaining: float = 0.0
    start_ms: Optional[float] = None


Feeder = Callable[[int], Optional[IterationSpec]]


class _Runner:
    """Compute and copy streams of one GPU instance serving one request."""

    def __init__(self, model: ModelSpec, feeder: Feeder, start_ms: float = 0.0, name: str = "gpu"):
        self.model = model
        self.feeder = feeder
        self.name = name
        self.start_ms = start_ms
        self.iters: list[_Iteration] = []
        self.exhausted = False
        self.finished = False
        self.cursor = (0, 1)
        self.computing: Optional[tuple[_Iteration, int, float]] = None
        self.prefetches: deque[_Job] = deque()
        self.writebacks: deque[_Job] = deque()
        self.active: Optional[_Job] = None
        self.slots_used = 0
        first = self._feed(0)
        if first is None:
            self.finished = True
        else:
            first.start_ms = start_ms

    # iteration bookkeeping

    def _feed(self, k: int) -> Optional[_Iteration]:
        if k < len(self.iters):
            return self.iters[k]
        if self.exhausted:
            return None
        assert k == len(self.iters)
        spec = self.feeder(k)
        if spec is None:
            self.exhausted = True
            return None
        spec.plan.check_model(self.model)
        it = _Iteration(k, spec)
        self.iters.append(it)
        for layer in spec.plan.offloaded_layers:
            nbytes = layer_transfer_bytes(self.model, spec.plan, layer, spec.batch, spec.context_tokens)
            self.prefetches.append(_Job("prefetch", it, layer, nbytes))
        return it

    def _eligible(self, job: _Job) -> bool:
        it, m = job.it, job.layer
        plan = it.spec.plan
        if plan.prefetch is Prefetch.EAGER:
            return True
        if plan.prefetch is Prefetch.INTERVAL_START:
            anchor = plan.prefetch_anchor[m]
            if anchor == 0:
                return it.start_ms is not None
            return anchor in it.compute_start
        # one-ahead
        if m > 1:
            return (m - 1) in it.compute_start
        if it.index > 0:
            return self.model.num_layers in self.iters[it.index - 1].compute_start
        return it.start_ms is not None

    def _lookahead(self) -> None:
        # prefetch may run one iteration ahead of compute when the policy allows it
        last = self.iters[-1]
        if self.exhausted or last.index != self.cursor[0]:
            return
        if last.spec.plan.prefetch is Prefetch.INTERVAL_START:
            return
        self._feed(last.index + 1)

    def poll(self, now: float) -> bool:
        """Start whatever can start at ``now``; return True if anything did."""
        if self.finished:
            return False
        changed = False
        if self.active is None:
            if not self.writebacks and not self.prefetches:
                self._lookahead()
            job = None
            if self.writebacks:
                job = self.writebacks.popleft()
            elif self.prefetches:
                head = self.prefetches[0]
                if self.slots_used < head.it.spec.plan.buffer_slots and self._eligible(head):
                    job = self.prefetches.popleft()
                    self.slots_used += 1
            if job is not None:
                job.start_ms = now
                job.remaining = float(job.nbytes)
                self.active = job
                changed = True
                if job.nbytes == 0:
                    self.finish_transfer(now)
        if self.computing is None:
            k, j = self.cursor
            it = self.iters[k]
            if it.spec.plan.fraction(j) == 0 or j in it.ready:
                it.compute_start[j] = now
                self.computing = (it, j, now + it.spec.compute_ms)
                changed = True
        return changed

    def next_compute_end(self) -> float:
        return self.computing[2] if self.computing else math.inf

    def finish_compute(self, now: float) -> None:
        it, j, _ = self.computing
        self.computing = None
        it.events.append(TraceEvent("compute", j, "compute", it.compute_start[j], now))
        if it.spec.plan.fraction(j) > 0:
            if it.spec.plan.writeback_counted:
                nbytes = layer_transfer_bytes(self.model, it.spec.plan, j, it.spec.batch, it.spec.context_tokens)
                self.writebacks.append(_Job("writeback", it, j, nbytes))
            else:
                self.slots_used -= 1
        if j < self.model.num_layers:
            self.cursor = (it.index, j + 1)
            return
        it.end_ms = now
        nxt = self._feed(it.index + 1)
        if nxt is None:
            self.finished = True
            return
        nxt.start_ms = now
        self.cursor = (nxt.index, 1)

    def finish_transfer(self, now: float) -> None:
        job = self.active
        self.active = None
        job.it.events.append(_SizedEvent("copy", job.layer, job.kind, job.start_ms, now, job.nbytes))
        if job.kind == "prefetch":
            job.it.ready[job.layer] = now
        else:
            self.slots_used -= 1

    @property
    def transferring(self) -> bool:
        return self.active is not None

    def completed(self) -> list[_Iteration]:
        return [it for it in self.iters if it.end_ms is not None]


@dataclass(frozen=True)
class BusSegment:
    start_ms: float
    end_ms: float
    active_transfers: int
    rate_each: float  # bytes/s per active transfer
    capacity: float  # bytes/s

    @property
    def utilization(self) -> float:
        return self.active_transfers * self.rate_each / self.capacity


class _Clock:
    """Advances a set of runners that share one bus."""

    def __init__(self, bandwidth: BandwidthLike, start_ms: float = 0.0):
        self.schedule = as_schedule(bandwidth)
        self.now = start_ms
        self.runners: list[_Runner] = []
        self.segments: list[BusSegment] = []

    def settle(self) -> None:
        changed = True
        while changed:
            changed = False
            for r in self.runners:
                while r.poll(self.now):
                    changed = True

    def step(self, horizon: float = math.inf) -> bool:
        """Settle, then advance to the next event (no further than ``horizon``)."""
        self.settle()
        moving = [r for r in self.runners if r.transferring]
        capacity = self.schedule(self.now)
        rate = capacity / 1000.0 / len(moving) if moving else 0.0
        t_next = min([r.next_compute_end() for r in self.runners] + [self.schedule.next_change(self.now), horizon])
        done_at = {}
        for r in moving:
            t_done = self.now + r.active.remaining / rate
            done_at[id(r)] = t_done
            t_next = min(t_next, t_done)
        if t_next == math.inf:
            return False
        dt = t_next - self.now
        if dt > 0:
            self.segments.append(BusSegment(self.now, t_next, len(moving), rate * 1000.0, capacity))
        for r in moving:
            if done_at[id(r)] <= t_next:
                r.active.remaining = 0.0
            else:
                r.active.remaining = max(0.0, r.active.remaining - rate * dt)
        self.now = t_next
        for r in self.runners:
            if r.computing is not None and r.computing[2] <= t_next:
                r.finish_compute(t_next)
        for r in moving:
            if r.active is not None and r.active.remaining <= 0.0:
                r.finish_transfer(t_next)
        return True

    def run(self, stop: Callable[[], bool] = lambda: False) -> None:
        while not stop():
            if not self.step():
                break


# -- single iteration ----------------------------------------------------------


class _StandaloneFeeder:
    def __init__(self, spec: IterationSpec):
        self.upcoming = spec
        self.fed = 0

    def __call__(self, k: int) -> Optional[IterationSpec]:
        spec = self.upcoming
        # placeholder for lookahead: same plan, next decode step
        self.upcoming = IterationSpec(DECODE, spec.batch, spec.context_tokens + 1, spec.plan, spec.compute_ms)
        return spec


@dataclass
class Carry:
    """Copy-stream state handed from one iteration to the next."""

    runner: _Runner = field(repr=False)
    clock: _Clock = field(repr=False)

    @property
    def clock_ms(self) -> float:
        return self.clock.now


def simulate_iteration(
    profile: LatencyProfile,
    model: ModelSpec,
    plan: OffloadPlan,
    phase: str,
    batch: int,
    seq_len: int,
    bandwidth_fn: BandwidthLike,
    carry: Optional[Carry] = None,
) -> tuple[float, IterationTrace, Carry]:
    """Run one iteration; returns (duration_ms, trace, carry for the next call).

    ``seq_len`` is the prompt length for prefill and the cached context for
    decode.  A carry is only valid for continuing with the same plan.
    """
    plan.check_model(model)
    compute_ms = lookup_compute_time(profile, phase, batch, seq_len)
    context = 0 if phase == PREFILL else seq_len
    spec = IterationSpec(phase, batch, context, plan, compute_ms)
    if carry is None:
        feeder = _StandaloneFeeder(spec)
        runner = _Runner(model, feeder)
        clock = _Clock(bandwidth_fn)
        clock.runners.append(runner)
    else:
        carry = copy.deepcopy(carry)
        runner, clock = carry.runner, carry.clock
        clock.schedule = as_schedule(bandwidth_fn)
        k = runner.cursor[0]
        it = runner.iters[k]
        if it.spec.plan != plan:
            raise PlanError("carry was produced for a different plan")
        it.spec.phase, it.spec.batch, it.spec.compute_ms = phase, batch, compute_ms
        if it.spec.context_tokens != context:
            it.spec.context_tokens = context
            for job in runner.prefetches:
                if job.it is it:
                    job.nbytes = layer_transfer_bytes(model, plan, job.layer, batch, context)
        runner.feeder.upcoming = IterationSpec(DECODE, batch, context + 1, plan, compute_ms)
    target = runner.iters[runner.cursor[0]]
    clock.run(stop=lambda: target.end_ms is not None)
    if target.end_ms is None:
        raise AssertionError("iteration did not complete")
    trace = target.trace()
    return trace.duration_ms, trace, Carry(runner, clock)


# -- whole requests ---------------------------------------------------------------


@dataclass(frozen=True)
class Metrics:
    ttft_ms: Optional[float]
    tpot_ms: Optional[float]
    steady_tpot_ms: Optional[float]
    warm_tpot_ms: Optional[float]
    throughput_tokens_per_s: Optional[float]
    gpu_mem_peak_bytes: Optional[int]
    host_mem_bytes: int
    bytes_transferred_per_iter: int
    decode_iteration_ms: tuple[float, ...] = field(repr=False, default=())

    def to_dict(self) -> dict:
        return {
            "ttft_ms": self.ttft_ms,
            "tpot_ms": self.tpot_ms,
            "steady_tpot_ms": self.steady_tpot_ms,
            "warm_tpot_ms": self.warm_tpot_ms,
            "throughput_tokens_per_s": self.throughput_tokens_per_s,
            "gpu_mem_peak_bytes": self.gpu_mem_peak_bytes,
            "host_mem_bytes": self.host_mem_bytes,
            "bytes_transferred_per_iter": self.bytes_transferred_per_iter,
        }


@dataclass(frozen=True)
class RequestShape:
    batch: int
    seq_len: int
    output_len: int

    @property
    def total_tokens(self) -> int:
        return self.batch * (self.seq_len + self.output_len)


def request_specs(
    profile: LatencyProfile,
    shape: RequestShape,
    include_prefill: bool,
    plan_for: Callable[[str, int], OffloadPlan],
) -> Callable[[int], Optional[IterationSpec]]:
    """Feeder yielding the prefill iteration (optional) then output_len - 1 decode steps.

    Decode compute time is read once at the prompt length: each layer's input is
    one token per sequence regardless of the step.
    """
    if shape.output_len < 1:
        raise ValueError("output_len must be >= 1")
    prefill_ms = lookup_compute_time(profile, PREFILL, shape.batch, shape.seq_len) if include_prefill else None
    decode_ms = lookup_compute_time(profile, DECODE, shape.batch, shape.seq_len) if shape.output_len > 1 else None
    offset = 1 if include_prefill else 0
    total = offset + shape.output_len - 1

    def feed(k: int) -> Optional[IterationSpec]:
        if k >= total:
            return None
        if k < offset:
            plan = plan_for(PREFILL, k)
            return IterationSpec(PREFILL, shape.batch, 0, plan, prefill_ms)
        step = k - offset + 1
        plan = plan_for(DECODE, k)
        return IterationSpec(DECODE, shape.batch, shape.seq_len + step - 1, plan, decode_ms)

    return feed


def metrics_from_traces(
    model: ModelSpec,
    traces: Sequence[IterationTrace],
    shape: RequestShape,
    gpu: Optional[GpuSpec] = None,
) -> Metrics:
    prefill = [t for t in traces if t.phase == PREFILL]
    decode = [t for t in traces if t.phase == DECODE]
    ttft = prefill[0].duration_ms if prefill else None
    durations = tuple(t.duration_ms for t in decode)
    tpot = steady = warm = thr = None
    if durations:
        tpot = sum(durations) / len(durations)
        tail = durations[-STEADY_WINDOW:]
        steady = sum(tail) / len(tail)
        rest = durations[1:]
        warm = sum(rest) / len(rest) if rest else None
        thr = shape.batch * 1000.0 / tpot
    plans = [t.plan for t in traces]
    host = max(host_memory_bytes(model, p, shape.total_tokens) for p in plans)
    mem = None
    if gpu is not None:
        mem = max(gpu_memory_usage(model, gpu, p, shape.batch, shape.total_tokens) for p in plans)
    last = traces[-1]
    moved = sum(e.nbytes for e in last.events if isinstance(e, _SizedEvent))
    return Metrics(ttft, tpot, steady, warm, thr, mem, host, moved, durations)


@dataclass
class RequestRun:
    metrics: Metrics
    traces: list[IterationTrace]
    segments: list[BusSegment]


def run_request(
    profile: LatencyProfile,
    model: ModelSpec,
    plan: OffloadPlan,
    batch: int,
    seq_len: int,
    output_len: int,
    bandwidth_fn: BandwidthLike,
    *,
    gpu: Optional[GpuSpec] = None,
    prefill_plan: Optional[OffloadPlan] = None,
    include_prefill: bool = True,
) -> RequestRun:
    shape = RequestShape(batch, seq_len, output_len)
    if gpu is not None and shape.total_tokens > model.max_position_tokens * batch:
        raise ValueError("request exceeds the model's position limit")

    def plan_for(phase: str, k: int) -> OffloadPlan:
        return prefill_plan if (phase == PREFILL and prefill_plan is not None) else plan

    runner = _Runner(model, request_specs(profile, shape, include_prefill, plan_for))
    clock = _Clock(bandwidth_fn)
    clock.runners.append(runner)
    clock.run(stop=lambda: runner.finished)
    traces = [it.trace() for it in runner.completed()]
    return RequestRun(metrics_from_traces(model, traces, shape, gpu), traces, clock.segments)


def simulate_request(
    profile: LatencyProfile,
    model: ModelSpec,
    plan: OffloadPlan,
    batch: int,
    seq_len: int,
    output_len: int,
    bandwidth_fn: BandwidthLike,
    **kwargs,
) -> Metrics:
    return run_request(profile, model, plan, batch, seq_len, output_len, bandwidth_fn, **kwargs).metrics


def decode_latency(
    profile: LatencyProfile,
    model: ModelSpec,
    plan: OffloadPlan,
    batch: int,
    seq_len: int,
    bandwidth_fn: BandwidthLike,
    window: int = STEADY_WINDOW,
) -> float:
    """Worst warm decode step time a request of up to ``window`` warm steps can see.

    The first (cold) step is excluded; the result is the largest mean over
    every prefix of the next ``window`` steps, so it is at least the mean of
    all ``window`` of them and bounds requests of any length.
    """
    run = run_request(profile, model, plan, batch, seq_len, window + 2, bandwidth_fn, include_prefill=False)
    warm = run.metrics.decode_iteration_ms[1:]
    worst, total = 0.0, 0.0
    for n, d in enumerate(warm, 1):
        total += d
        worst = max(worst, total / n)
    return worst


def prefill_latency(
    profile: LatencyProfile,
    model: ModelSpec,
    plan: OffloadPlan,
    batch: int,
    seq_len: int,
    bandwidth_fn: BandwidthLike,
) -> float:
    duration, _, _ = simulate_iteration(profile, model, plan, PREFILL, batch, seq_len, bandwidth_fn)
    return duration


# -- shared bus --------------------------------------------------------------------


@dataclass(frozen=True)
class BusTenant:
    model: ModelSpec
    profile: LatencyProfile
    plan: OffloadPlan
    request: RequestShape
    gpu: Optional[GpuSpec] = None
    include_prefill: bool = False
    start_ms: float = 0.0


@dataclass
class BusRun:
    metrics: list[Metrics]
    traces: list[list[IterationTrace]]
    segments: list[BusSegment]


def simulate_bus(tenants: Sequence[BusTenant], bus: BusSpec | BandwidthLike,
                 horizon_iterations: Optional[int] = None) -> BusRun:
    """Run several GPU instances whose transfers share one bus (fluid model).

    ``horizon_iterations`` caps the iterations each tenant runs.
    """
    if not tenants:
        raise ValueError("need at least one GPU")
    clock = _Clock(bus)
    pending = sorted(range(len(tenants)), key=lambda n: (tenants[n].start_ms, n))
    runners: dict[int, _Runner] = {}

    def launch_due() -> None:
        while pending and tenants[pending[0]].start_ms <= clock.now:
            n = pending.pop(0)
            t = tenants[n]
            feed = request_specs(t.profile, t.request, t.include_prefill, lambda phase, k, p=t.plan: p)
            if horizon_iterations is not None:
                feed = _capped(feed, horizon_iterations)
            runners[n] = _Runner(t.model, feed, clock.now, name=f"gpu{n}")
            clock.runners.append(runners[n])

    while True:
        launch_due()
        horizon = tenants[pending[0]].start_ms if pending else math.inf
        if not clock.step(horizon) and not pending:
            break
        if all(r.finished for r in runners.values()) and not pending:
            break
    metrics, traces = [], []
    for n, t in enumerate(tenants):
        tr = [it.trace() for it in runners[n].completed()]
        traces.append(tr)
        metrics.append(metrics_from_traces(t.model, tr, t.request, t.gpu))
    return BusRun(metrics, traces, clock.segments)


def _capped(feed: Feeder, limit: int) -> Feeder:
    def capped(k: int) -> Optional[IterationSpec]:
        return feed(k) if k < limit else None
    return capped
