"""Per-bus coordinator: admission, interval assignment and boundary-time switches.

The coordinator keeps one state entry per GPU on a bus.  Admitting a request
picks an interval for every active GPU so that

* each interval lies between the GPU's SLO-derived minimum and its
  memory-derived maximum,
* the bandwidth ledger (iteration bytes per SLO period, summed) fits the bus,
* with ``share_check`` on, each offloading GPU still meets its SLO when it only
  receives ``bandwidth / n`` while ``n`` GPUs offload (fluid sharing never
  gives an active transfer less than that),

and among those the combination that parks the most bytes in host memory wins.
Peers receive their new interval as *pending*; it takes effect at their next
iteration boundary.
"""

from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

from .analyzer import PerformanceRecord, lookup_interval
from .engine import (
    BandwidthLike,
    BusSegment,
    IterationTrace,
    Metrics,
    RequestShape,
    _Clock,
    _Runner,
    consumed_bandwidth,
    host_memory_bytes,
    metrics_from_traces,
    request_specs,
)
from .interval import (
    INFEASIBLE,
    Interval,
    candidate_intervals,
    interval_rank,
    max_feasible_interval,
    offloaded_layers,
    plan_from_interval,
)
from .profiles import DECODE, PREFILL, BusSpec, GpuSpec, LatencyProfile, ModelSpec


class CoordinatorError(ValueError):
    pass


@dataclass(frozen=True)
class ServiceRequest:
    id: str
    batch: int
    seq_len: int
    output_len: int
    tpot_slo_ms: float
    ttft_slo_ms: Optional[float] = None

    def __post_init__(self):
        if self.batch < 1 or self.seq_len < 1 or self.output_len < 1:
            raise ValueError("batch, seq_len and output_len must be >= 1")
        if self.tpot_slo_ms <= 0 or (self.ttft_slo_ms is not None and self.ttft_slo_ms <= 0):
            raise ValueError("SLOs must be > 0")

    @property
    def shape(self) -> RequestShape:
        return RequestShape(self.batch, self.seq_len, self.output_len)


@dataclass
class GpuContext:
    """Static facts about one GPU instance on the bus.

    ``records`` maps a sharing level ``n`` to a record built at ``bandwidth / n``;
    level 1 is the uncontended record.  ``phase_split`` instances serve decode
    only; otherwise the prefill SLO constrains the interval too.
    """

    gpu_id: str
    model: ModelSpec
    gpu: GpuSpec
    records: Mapping[int, PerformanceRecord]
    phase_split: bool = True
    profile: Optional[LatencyProfile] = field(default=None, repr=False)

    def __post_init__(self):
        if 1 not in self.records:
            raise CoordinatorError(f"{self.gpu_id}: an uncontended record (level 1) is required")
        metas = {(r.meta.policy, r.meta.kv_offload, r.meta.buffer_slots, r.meta.writeback_counted)
                 for r in self.records.values()}
        if len(metas) != 1:
            raise CoordinatorError(f"{self.gpu_id}: records disagree on policy settings")

    @property
    def meta(self):
        return self.records[1].meta

    def phases(self) -> tuple[str, ...]:
        return (DECODE,) if self.phase_split else (PREFILL, DECODE)

    def plan(self, i: Interval):
        m = self.meta
        return plan_from_interval(self.model, i, m.policy, m.kv_offload,
                                  buffer_slots=m.buffer_slots, writeback_counted=m.writeback_counted)


@dataclass
class GpuInstanceState:
    gpu_id: str
    model_id: str
    active_request: Optional[ServiceRequest] = None
    current_interval: Optional[Interval] = None
    min_interval: Optional[Interval] = None
    max_interval: Optional[Interval] = None
    pending_interval: Optional[Interval] = None

    @property
    def active(self) -> bool:
        return self.active_request is not None

    def check(self) -> None:
        if not self.active:
            return
        lo, hi = interval_rank(self.min_interval), interval_rank(self.max_interval)
        for i in (self.current_interval, self.pending_interval):
            assert lo <= interval_rank(i) <= hi, f"{self.gpu_id}: interval {i!r} outside [{self.min_interval!r}, {self.max_interval!r}]"


@dataclass
class BusState:
    bus: BusSpec
    gpus: dict[str, GpuInstanceState]
    ledger: dict[str, float] = field(default_factory=dict)  # gpu id -> bytes/s

    @property
    def committed(self) -> float:
        return sum(self.ledger.values())

    def check(self) -> None:
        assert self.committed <= self.bus.bandwidth_bytes_per_s, "bandwidth ledger exceeds the bus"
        for g in self.gpus.values():
            g.check()


@dataclass(frozen=True)
class Admit:
    assignments: dict[str, Interval]
    host_memory_bytes: int


@dataclass(frozen=True)
class Reject:
    reason: str


Decision = Union[Admit, Reject]


@dataclass(frozen=True)
class Combination:
    assignments: dict[str, Interval]
    host_memory_bytes: int
    bandwidth: float
    valid: bool


class Coordinator:
    def __init__(
        self,
        bus: BusSpec,
        gpus: Sequence[GpuContext],
        *,
        share_check: bool = True,
        reoptimize_on_release: bool = True,
    ):
        ids = [g.gpu_id for g in gpus]
        if len(set(ids)) != len(ids):
            raise CoordinatorError("duplicate gpu id")
        if len(ids) > bus.gpu_count:
            raise CoordinatorError("more GPU instances than the bus has slots")
        self.contexts = {g.gpu_id: g for g in gpus}
        self.share_check = share_check
        self.reoptimize_on_release = reoptimize_on_release
        if share_check:
            for g in gpus:
                missing = [n for n in range(2, len(gpus) + 1) if n not in g.records]
                if missing:
                    raise CoordinatorError(f"{g.gpu_id}: share check needs records for sharing levels {missing}")
        self.state = BusState(bus, {g.gpu_id: GpuInstanceState(g.gpu_id, g.model.name) for g in gpus})

    # -- bounds ----------------------------------------------------------------

    def _ctx(self, gpu_id: str) -> GpuContext:
        try:
            return self.contexts[gpu_id]
        except KeyError:
            raise CoordinatorError(f"unknown gpu id {gpu_id!r}") from None

    def min_interval(self, gpu_id: str, request: ServiceRequest, level: int = 1) -> Interval:
        """Smallest interval meeting every served phase's SLO at ``bandwidth / level``."""
        ctx = self._ctx(gpu_id)
        record = ctx.records[level]
        worst: Interval = 1
        for phase in ctx.phases():
            slo = request.tpot_slo_ms if phase == DECODE else request.ttft_slo_ms
            if slo is None:
                raise CoordinatorError(f"request {request.id} lacks a {phase} SLO")
            i = lookup_interval(record, phase, slo, request.batch, request.seq_len)
            if i is INFEASIBLE:
                return INFEASIBLE
            worst = max(worst, i, key=interval_rank)
        return worst

    def max_interval(self, gpu_id: str, request: ServiceRequest) -> Interval:
        ctx = self._ctx(gpu_id)
        m = ctx.meta
        if request.shape.total_tokens > ctx.model.max_position_tokens * request.batch:
            return INFEASIBLE
        return max_feasible_interval(ctx.model, ctx.gpu, request.batch, request.shape.total_tokens,
                                     m.policy, m.kv_offload, buffer_slots=m.buffer_slots)

    def bandwidth_estimate(self, gpu_id: str, request: ServiceRequest, i: Interval) -> float:
        """Ledger entry: iteration bytes over the SLO period, worst served phase."""
        ctx = self._ctx(gpu_id)
        plan = ctx.plan(i)
        # KV bytes grow with the context; charge the longest one
        need = consumed_bandwidth(ctx.model, plan, request.tpot_slo_ms, request.batch,
                                  request.seq_len + request.output_len - 1)
        if not ctx.phase_split:
            need = max(need, consumed_bandwidth(ctx.model, plan, request.ttft_slo_ms, request.batch, 0))
        return need

    def host_memory(self, gpu_id: str, request: ServiceRequest, i: Interval) -> int:
        ctx = self._ctx(gpu_id)
        return host_memory_bytes(ctx.model, ctx.plan(i), request.shape.total_tokens)

    def candidates(self, gpu_id: str, request: ServiceRequest) -> list[Interval]:
        lo, hi = self.min_interval(gpu_id, request), self.max_interval(gpu_id, request)
        if lo is INFEASIBLE or hi is INFEASIBLE:
            return []
        L = self._ctx(gpu_id).model.num_layers
        return [i for i in candidate_intervals(L) if interval_rank(lo) <= interval_rank(i) <= interval_rank(hi)]

    # -- combinations ------------------------------------------------------------

    def _offloads(self, gpu_id: str, i: Interval) -> bool:
        return bool(offloaded_layers(self._ctx(gpu_id).model.num_layers, i))

    def evaluate(self, assignment: Mapping[str, Interval], requests: Mapping[str, ServiceRequest]) -> Combination:
        bw = sum(self.bandwidth_estimate(g, requests[g], i) for g, i in assignment.items())
        host = sum(self.host_memory(g, requests[g], i) for g, i in assignment.items())
        valid = bw <= self.state.bus.bandwidth_bytes_per_s
        if valid and self.share_check:
            sharing = [g for g, i in assignment.items() if self._offloads(g, i)]
            n = len(sharing)
            if n >= 2:
                for g in sharing:
                    floor = self.min_interval(g, requests[g], n)
                    if floor is INFEASIBLE or interval_rank(assignment[g]) < interval_rank(floor):
                        valid = False
                        break
        return Combination(dict(assignment), host, bw, valid)

    def enumerate(self, requests: Mapping[str, ServiceRequest]) -> list[Combination]:
        """Every combination within each GPU's [min, max], in id order."""
        ids = sorted(requests)
        ranges = [self.candidates(g, requests[g]) for g in ids]
        return [self.evaluate(dict(zip(ids, combo)), requests) for combo in itertools.product(*ranges)]

    def _best(self, requests: Mapping[str, ServiceRequest], target: Optional[str]) -> Optional[Combination]:
        peers = sorted(g for g in requests if g != target)

        def key(c: Combination):
            head = (interval_rank(c.assignments[target]),) if target is not None else ()
            return (-c.host_memory_bytes, *head, *(interval_rank(c.assignments[g]) for g in peers))

        valid = [c for c in self.enumerate(requests) if c.valid]
        return min(valid, key=key) if valid else None

    def _active_requests(self) -> dict[str, ServiceRequest]:
        return {g: s.active_request for g, s in self.state.gpus.items() if s.active}

    # -- operations --------------------------------------------------------------

    def admit(self, gpu_id: str, request: ServiceRequest) -> Decision:
        st = self.state.gpus[self._ctx(gpu_id).gpu_id]
        if st.active:
            raise CoordinatorError(f"{gpu_id} is busy")
        lo = self.min_interval(gpu_id, request)
        if lo is INFEASIBLE:
            return Reject("no interval meets the SLO")
        hi = self.max_interval(gpu_id, request)
        if hi is INFEASIBLE:
            return Reject("request does not fit in GPU memory")
        if interval_rank(lo) > interval_rank(hi):
            return Reject(f"SLO needs interval <= {lo!r} but memory allows at most {hi!r}")
        requests = self._active_requests()
        if not requests:
            if self.bandwidth_estimate(gpu_id, request, lo) > self.state.bus.bandwidth_bytes_per_s:
                return Reject("bandwidth demand exceeds the bus")
            choice = {gpu_id: lo}
        else:
            requests[gpu_id] = request
            best = self._best(requests, gpu_id)
            if best is None:
                return Reject("no interval combination fits the bus")
            choice = best.assignments
        st.active_request, st.min_interval, st.max_interval = request, lo, hi
        st.current_interval = st.pending_interval = choice[gpu_id]
        for g, i in choice.items():
            if g != gpu_id:
                self.state.gpus[g].pending_interval = i
        self._refresh_ledger()
        host = sum(self.host_memory(g, self.state.gpus[g].active_request, i) for g, i in choice.items())
        return Admit(dict(choice), host)

    def on_iteration_boundary(self, gpu_id: str) -> Interval:
        st = self.state.gpus[self._ctx(gpu_id).gpu_id]
        if not st.active:
            raise CoordinatorError(f"{gpu_id} is idle")
        st.current_interval = st.pending_interval
        return st.current_interval

    def release(self, gpu_id: str) -> BusState:
        st = self.state.gpus[self._ctx(gpu_id).gpu_id]
        if not st.active:
            raise CoordinatorError(f"{gpu_id} is idle")
        st.active_request = st.current_interval = st.pending_interval = None
        st.min_interval = st.max_interval = None
        requests = self._active_requests()
        if self.reoptimize_on_release and requests:
            best = self._best(requests, None)
            if best is not None:
                for g, i in best.assignments.items():
                    self.state.gpus[g].pending_interval = i
        self._refresh_ledger()
        return self.state

    def _refresh_ledger(self) -> None:
        self.state.ledger = {
            g: self.bandwidth_estimate(g, s.active_request, s.pending_interval)
            for g, s in self.state.gpus.items()
            if s.active
        }


# -- driving a shared bus ----------------------------------------------------------


@dataclass(frozen=True)
class Arrival:
    gpu_id: str
    request: ServiceRequest
    arrival_ms: float = 0.0


@dataclass
class RequestOutcome:
    request: ServiceRequest
    gpu_id: str
    admitted: bool = False
    reason: Optional[str] = None
    admitted_ms: Optional[float] = None
    start_ms: Optional[float] = None
    metrics: Optional[Metrics] = None
    traces: list[IterationTrace] = field(default_factory=list, repr=False)
    intervals: list[tuple[int, Interval]] = field(default_factory=list)  # (iteration, interval)


@dataclass
class CoordinatedRun:
    outcomes: list[RequestOutcome]
    decisions: list[dict]
    segments: list[BusSegment]


def interval_token(i: Interval):
    """JSON form of an interval: the integer, ``"none"`` or ``"infeasible"``."""
    return i if isinstance(i, int) else i.value


def run_coordinated(
    coordinator: Coordinator,
    arrivals: Sequence[Arrival],
    bandwidth: Optional[BandwidthLike] = None,
) -> CoordinatedRun:
    """Serve ``arrivals`` on a shared bus, consulting ``coordinator`` at every step.

    Each GPU serves its requests one at a time in arrival order.  A newly
    admitted request starts only once every running peer whose interval changed
    has completed one iteration with the new interval, so its transfers never
    compete with a peer still running (or refilling) a plan sized for less
    contention.
    Every iteration takes the interval pending at the moment it is created.
    """
    for a in arrivals:
        ctx = coordinator._ctx(a.gpu_id)
        if ctx.profile is None:
            raise CoordinatorError(f"{a.gpu_id}: a latency profile is needed to simulate")
    clock = _Clock(bandwidth if bandwidth is not None else coordinator.state.bus)
    todo = sorted(range(len(arrivals)), key=lambda n: (arrivals[n].arrival_ms, n))
    outcomes = [RequestOutcome(a.request, a.gpu_id) for a in arrivals]
    queues: dict[str, deque[int]] = {g: deque() for g in coordinator.contexts}
    running: dict[str, tuple[_Runner, int]] = {}
    # target gpu -> (its request, {peer gpu: [peer request, first iteration on the new interval]})
    waiting: dict[str, tuple[int, dict[str, list]]] = {}
    decisions: list[dict] = []

    def log(event: str, gpu: str, n: int, **extra) -> None:
        decisions.append({"t_ms": clock.now, "event": event, "gpu": gpu, "request": arrivals[n].request.id, **extra})

    def feeder(gpu: str, n: int):
        ctx = coordinator.contexts[gpu]
        req = arrivals[n].request
        applied: dict[int, Interval] = {}

        def plan_for(phase: str, k: int):
            applied[k] = coordinator.on_iteration_boundary(gpu)
            outcomes[n].intervals.append((k, applied[k]))
            for _, awaited in waiting.values():
                mark = awaited.get(gpu)
                if mark is not None and mark[0] == n and mark[1] is None:
                    mark[1] = k
            return ctx.plan(applied[k])

        base = request_specs(ctx.profile, req.shape, not ctx.phase_split, plan_for)

        def feed(k: int):
            spec = base(k)
            if spec is not None:
                spec.label = applied[k]
            return spec

        return feed

    def switched(peer: str, mark: list) -> bool:
        n, k = mark
        if peer not in running or running[peer][1] != n:
            return True
        return k is not None and running[peer][0].iters[k].end_ms is not None

    while True:
        busy = True
        while busy:
            busy = False
            while todo and arrivals[todo[0]].arrival_ms <= clock.now:
                n = todo.pop(0)
                queues[arrivals[n].gpu_id].append(n)
            for gpu in sorted(running):
                runner, n = running[gpu]
                if runner.finished:
                    out = outcomes[n]
                    ctx = coordinator.contexts[gpu]
                    out.traces = [it.trace() for it in runner.completed()]
                    out.metrics = metrics_from_traces(ctx.model, out.traces, out.request.shape, ctx.gpu)
                    clock.runners.remove(runner)
                    del running[gpu]
                    coordinator.release(gpu)
                    log("release", gpu, n, pending={g: interval_token(s.pending_interval)
                                                     for g, s in sorted(coordinator.state.gpus.items()) if s.active})
                    busy = True
            for gpu in sorted(queues):
                if queues[gpu] and gpu not in running and gpu not in waiting:
                    n = queues[gpu].popleft()
                    decision = coordinator.admit(gpu, arrivals[n].request)
                    out = outcomes[n]
                    if isinstance(decision, Reject):
                        out.reason = decision.reason
                        log("reject", gpu, n, reason=decision.reason)
                    else:
                        out.admitted, out.admitted_ms = True, clock.now
                        awaited = {
                            g: [running[g][1], None] for g in running
                            if coordinator.state.gpus[g].current_interval != coordinator.state.gpus[g].pending_interval
                        }
                        waiting[gpu] = (n, awaited)
                        log("admit", gpu, n, assignments={g: interval_token(i) for g, i in sorted(decision.assignments.items())},
                            host_memory_bytes=decision.host_memory_bytes)
                    busy = True
            for gpu in sorted(waiting):
                n, awaited = waiting[gpu]
                if all(switched(p, k) for p, k in awaited.items()):
                    del waiting[gpu]
                    runner = _Runner(coordinator.contexts[gpu].model, feeder(gpu, n), clock.now, name=gpu)
                    outcomes[n].start_ms = clock.now
                    running[gpu] = (runner, n)
                    clock.runners.append(runner)
                    log("start", gpu, n)
                    busy = True
        horizon = arrivals[todo[0]].arrival_ms if todo else math.inf
        if not clock.step(horizon):
            if not todo and not running and not waiting:
                break
            raise AssertionError("coordinated run stalled")
    return CoordinatedRun(outcomes, decisions, clock.segments)
