"""Scenario files, policy drivers and reports.

A scenario names latency profiles, the GPUs sharing one bus, policy knobs and
an ordered list of requests.  It can be served by Select-N (record-driven
intervals under the coordinator) or by one of the reference policies, and the
result is a JSON report with per-request SLO verdicts.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

from .analyzer import PerformanceRecord, build_record
from .baselines import deepspeed_plan, flexgen_plan, naive_plan
from .coordinator import (
    Arrival,
    CoordinatedRun,
    Coordinator,
    GpuContext,
    RequestOutcome,
    ServiceRequest,
    interval_token,
    run_coordinated,
)
from .engine import (
    BusSegment,
    OffloadPlan,
    Prefetch,
    _Clock,
    _Runner,
    gpu_memory_usage,
    host_memory_bytes,
    metrics_from_traces,
    request_specs,
)
from .interval import INFEASIBLE
from .profiles import DECODE, PHASES, PREFILL, BusSpec, ProfileDocument, parse_profile_document

SCENARIO_VERSION = 1
REPORT_VERSION = 1
POLICIES = ("select-n", "deepspeed", "flexgen", "naive")


class ScenarioError(ValueError):
    pass


class NaiveInfeasible(RuntimeError):
    """The no-offload baseline cannot hold the model for some request."""


@dataclass(frozen=True)
class PolicyKnobs:
    prefetch: Prefetch = Prefetch.INTERVAL_START
    kv_offload: bool = False
    writeback_counted: bool = False
    buffer_slots: Optional[int] = None
    share_check: bool = True
    reoptimize_on_release: bool = True
    flexgen_step: float = 0.05
    flexgen_n_sharing: Optional[int] = None
    flexgen_reference_ms: Optional[float] = None
    flexgen_reference_ttft_ms: Optional[float] = None


@dataclass(frozen=True)
class GpuEntry:
    id: str
    profile: str
    phase_split: bool = True


@dataclass
class Scenario:
    name: str
    seed: int
    bus: BusSpec
    profiles: dict[str, ProfileDocument]
    gpus: list[GpuEntry]
    arrivals: list[Arrival]
    knobs: PolicyKnobs = field(default_factory=PolicyKnobs)
    record_grid: Optional[dict] = None

    def gpu(self, gpu_id: str) -> GpuEntry:
        return next(g for g in self.gpus if g.id == gpu_id)

    def doc(self, gpu_id: str) -> ProfileDocument:
        return self.profiles[self.gpu(gpu_id).profile]


# -- scenario documents --------------------------------------------------------------

_TOP = {"version", "name", "seed", "bus", "profiles", "gpus", "policy", "record_grid", "requests"}
_KNOBS = {f for f in PolicyKnobs.__dataclass_fields__}
_REQ = {"id", "gpu", "batch", "seq_len", "output_len", "tpot_slo_ms", "ttft_slo_ms", "arrival_ms"}


def _keys(obj, allowed, required, where):
    if not isinstance(obj, Mapping):
        raise ScenarioError(f"{where}: expected an object")
    extra = set(obj) - set(allowed)
    if extra:
        raise ScenarioError(f"{where}: unknown key {sorted(extra)[0]!r}")
    missing = set(required) - set(obj)
    if missing:
        raise ScenarioError(f"{where}: missing key {sorted(missing)[0]!r}")


def scenario_from_dict(doc: Mapping, base_dir: Path | str = ".") -> Scenario:
    base_dir = Path(base_dir)
    _keys(doc, _TOP, {"version", "bus", "profiles", "gpus", "requests"}, "scenario")
    if doc["version"] != SCENARIO_VERSION:
        raise ScenarioError(f"unsupported scenario version {doc['version']!r}")
    _keys(doc["bus"], {"bandwidth_bytes_per_s"}, {"bandwidth_bytes_per_s"}, "bus")
    gpus_raw = doc["gpus"]
    if not isinstance(gpus_raw, list) or not gpus_raw:
        raise ScenarioError("gpus: need a non-empty array")
    bus = BusSpec(float(doc["bus"]["bandwidth_bytes_per_s"]), len(gpus_raw))
    profiles = {}
    for key, src in doc["profiles"].items():
        if isinstance(src, Mapping) and set(src) == {"path"}:
            with open(base_dir / src["path"]) as fh:
                src = json.load(fh)
        profiles[key] = parse_profile_document(src)
    gpus = []
    for n, g in enumerate(gpus_raw):
        _keys(g, {"id", "profile", "phase_split"}, {"id", "profile"}, f"gpus[{n}]")
        if g["profile"] not in profiles:
            raise ScenarioError(f"gpus[{n}]: unknown profile {g['profile']!r}")
        gpus.append(GpuEntry(g["id"], g["profile"], bool(g.get("phase_split", True))))
    if len({g.id for g in gpus}) != len(gpus):
        raise ScenarioError("gpus: duplicate id")
    knobs_raw = dict(doc.get("policy", {}))
    _keys(knobs_raw, _KNOBS, (), "policy")
    if "prefetch" in knobs_raw:
        knobs_raw["prefetch"] = Prefetch(knobs_raw["prefetch"])
    knobs = PolicyKnobs(**knobs_raw)
    arrivals = []
    ids = set()
    for n, r in enumerate(doc["requests"]):
        where = f"requests[{n}]"
        _keys(r, _REQ, {"id", "gpu", "batch", "seq_len", "output_len", "tpot_slo_ms"}, where)
        if r["gpu"] not in {g.id for g in gpus}:
            raise ScenarioError(f"{where}: unknown gpu {r['gpu']!r}")
        if r["id"] in ids:
            raise ScenarioError(f"{where}: duplicate id {r['id']!r}")
        ids.add(r["id"])
        entry = next(g for g in gpus if g.id == r["gpu"])
        ttft = r.get("ttft_slo_ms")
        if not entry.phase_split and ttft is None:
            raise ScenarioError(f"{where}: GPU {entry.id} runs prefill, so a TTFT SLO is required")
        try:
            req = ServiceRequest(r["id"], r["batch"], r["seq_len"], r["output_len"], float(r["tpot_slo_ms"]),
                                 None if ttft is None else float(ttft))
        except ValueError as exc:
            raise ScenarioError(f"{where}: {exc}") from None
        arrivals.append(Arrival(r["gpu"], req, float(r.get("arrival_ms", 0.0))))
    grid = doc.get("record_grid")
    if grid is not None:
        _keys(grid, {"slo_ms", "batch", "seq_len"}, {"slo_ms", "batch", "seq_len"}, "record_grid")
    return Scenario(doc.get("name", "scenario"), int(doc.get("seed", 0)), bus, profiles, gpus, arrivals, knobs, grid)


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    with open(path) as fh:
        doc = json.load(fh)
    sc = scenario_from_dict(doc, path.parent)
    if "name" not in doc:
        sc.name = path.stem
    return sc


# -- records and contexts -------------------------------------------------------------


def _pow2_ceil(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


def derived_grid(scenario: Scenario, profile_key: str) -> dict:
    """Smallest record grid covering every request served with ``profile_key``."""
    slos, batches, seqs = set(), set(), set()
    for a in scenario.arrivals:
        if scenario.gpu(a.gpu_id).profile != profile_key:
            continue
        r = a.request
        for slo in (r.tpot_slo_ms, r.ttft_slo_ms):
            if slo is not None and slo >= 2:
                slos.add(int(slo // 2) * 2)
        batches.add(_pow2_ceil(r.batch))
        seqs.add(_pow2_ceil(r.seq_len))
    return {"slo_ms": sorted(slos) or [2], "batch": sorted(batches) or [1], "seq_len": sorted(seqs) or [1]}


def build_contexts(scenario: Scenario, record: Optional[PerformanceRecord] = None) -> list[GpuContext]:
    """One context per GPU with records at every sharing level the bus can reach."""
    k = scenario.knobs
    levels = range(1, len(scenario.gpus) + 1) if k.share_check else (1,)
    cache: dict[tuple[str, int, bool], PerformanceRecord] = {}
    contexts = []
    for g in scenario.gpus:
        doc = scenario.profiles[g.profile]
        phases = (DECODE,) if g.phase_split else PHASES
        grid = scenario.record_grid or derived_grid(scenario, g.profile)
        records = {}
        for n in levels:
            key = (g.profile, n, g.phase_split)
            if key not in cache:
                if n == 1 and record is not None and record.meta.model == doc.model.name:
                    cache[key] = record
                else:
                    cache[key] = build_record(doc.profile, doc.model, doc.gpu, grid["slo_ms"], grid["batch"],
                                              grid["seq_len"], k.prefetch, k.kv_offload,
                                              bandwidth=scenario.bus.bandwidth_bytes_per_s / n, phases=phases,
                                              buffer_slots=k.buffer_slots, writeback_counted=k.writeback_counted)
            records[n] = cache[key]
        contexts.append(GpuContext(g.id, doc.model, doc.gpu, records, g.phase_split, doc.profile))
    return contexts


def make_coordinator(scenario: Scenario, record: Optional[PerformanceRecord] = None) -> Coordinator:
    k = scenario.knobs
    return Coordinator(scenario.bus, build_contexts(scenario, record), share_check=k.share_check,
                       reoptimize_on_release=k.reoptimize_on_release)


# -- static policies ---------------------------------------------------------------------


StaticPlan = Callable[[str, ServiceRequest, str], tuple[OffloadPlan, object]]


def static_plan_fn(scenario: Scenario, policy: str) -> StaticPlan:
    """``(gpu_id, request, phase) -> (plan, label)`` for a reference policy."""
    k = scenario.knobs
    n_sharing = k.flexgen_n_sharing or len(scenario.gpus)

    def plan(gpu_id: str, req: ServiceRequest, phase: str):
        doc = scenario.doc(gpu_id)
        if policy == "deepspeed":
            return deepspeed_plan(doc.model), "all"
        if policy == "naive":
            p = naive_plan(doc.model, doc.gpu, req.batch, req.shape.total_tokens, k.prefetch)
            if p is INFEASIBLE:
                raise NaiveInfeasible(f"{doc.model.name} does not fit on {gpu_id} for request {req.id}")
            return p, "none"
        if policy == "flexgen":
            if phase == DECODE:
                slo, ref = req.tpot_slo_ms, k.flexgen_reference_ms
            else:
                slo, ref = req.ttft_slo_ms, k.flexgen_reference_ttft_ms
            p, decision = flexgen_plan(doc.model, doc.gpu, slo, req.batch, req.seq_len, scenario.bus, n_sharing,
                                       k.flexgen_step, phase=phase, reference_ms=ref, kv_offload=k.kv_offload)
            return p, decision.portion
        raise ValueError(f"unknown static policy {policy!r}")

    return plan


def run_static(scenario: Scenario, policy: str) -> CoordinatedRun:
    """Serve the scenario with fixed per-request plans on the shared bus."""
    plan_fn = static_plan_fn(scenario, policy)
    arrivals = scenario.arrivals
    # one plan per request and phase, decided up front (static by construction)
    plans = {}
    for n, a in enumerate(arrivals):
        phases = (DECODE,) if scenario.gpu(a.gpu_id).phase_split else PHASES
        plans[n] = {ph: plan_fn(a.gpu_id, a.request, ph) for ph in phases}
    clock = _Clock(scenario.bus)
    todo = sorted(range(len(arrivals)), key=lambda n: (arrivals[n].arrival_ms, n))
    outcomes = [RequestOutcome(a.request, a.gpu_id) for a in arrivals]
    queues = {g.id: deque() for g in scenario.gpus}
    running: dict[str, tuple[_Runner, int]] = {}
    decisions: list[dict] = []
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
                    doc = scenario.doc(gpu)
                    out = outcomes[n]
                    out.traces = [it.trace() for it in runner.completed()]
                    out.metrics = metrics_from_traces(doc.model, out.traces, out.request.shape, doc.gpu)
                    clock.runners.remove(runner)
                    del running[gpu]
                    busy = True
            for gpu in sorted(queues):
                if queues[gpu] and gpu not in running:
                    n = queues[gpu].popleft()
                    req, by_phase = arrivals[n].request, plans[n]
                    out = outcomes[n]
                    out.admitted, out.admitted_ms, out.start_ms = True, clock.now, clock.now

                    def plan_for(phase, k, by_phase=by_phase, out=out):
                        p, label = by_phase[phase]
                        out.intervals.append((k, label))
                        return p

                    base = request_specs(scenario.doc(gpu).profile, req.shape, not scenario.gpu(gpu).phase_split,
                                         plan_for)
                    runner = _Runner(scenario.doc(gpu).model, _labelled(base, out), clock.now, name=gpu)
                    running[gpu] = (runner, n)
                    clock.runners.append(runner)
                    decisions.append({"t_ms": clock.now, "event": "start", "gpu": gpu, "request": req.id})
                    busy = True
        horizon = arrivals[todo[0]].arrival_ms if todo else math.inf
        if not clock.step(horizon):
            if not todo and not running:
                break
            raise AssertionError("static run stalled")
    return CoordinatedRun(outcomes, decisions, clock.segments)


def _labelled(feed, out: RequestOutcome):
    def labelled(k: int):
        spec = feed(k)
        if spec is not None:
            spec.label = out.intervals[-1][1]
        return spec
    return labelled


def run_policy(scenario: Scenario, policy: str, record: Optional[PerformanceRecord] = None) -> CoordinatedRun:
    if policy == "select-n":
        return run_coordinated(make_coordinator(scenario, record), scenario.arrivals)
    if policy in POLICIES:
        return run_static(scenario, policy)
    raise ValueError(f"unknown policy {policy!r}")


# -- reports -------------------------------------------------------------------------------


def _ratio(value: Optional[float], slo: Optional[float]) -> Optional[float]:
    if value is None or slo is None:
        return None
    return value / slo


def _token(label):
    if isinstance(label, (int, float, str)) and not isinstance(label, bool):
        return label
    return interval_token(label)


def request_entry(out: RequestOutcome) -> dict:
    r = out.request
    entry = {"id": r.id, "gpu": out.gpu_id}
    if not out.admitted:
        entry.update({"status": "rejected", "reason": out.reason, "ttft_ms": None, "tpot_ms": None,
                      "slo_ratio_ttft": None, "slo_ratio_tpot": None, "verdict": "rejected"})
        return entry
    m = out.metrics
    ratio_ttft = _ratio(m.ttft_ms, r.ttft_slo_ms)
    ratio_tpot = _ratio(m.warm_tpot_ms, r.tpot_slo_ms)
    met = all(x is None or x <= 1.0 for x in (ratio_ttft, ratio_tpot))
    entry.update({
        "status": "admitted",
        "start_ms": out.start_ms,
        "end_ms": out.traces[-1].end_ms if out.traces else out.start_ms,
        "ttft_ms": m.ttft_ms,
        "tpot_ms": m.warm_tpot_ms,
        "tpot_all_ms": m.tpot_ms,
        "steady_tpot_ms": m.steady_tpot_ms,
        "slo_ratio_ttft": ratio_ttft,
        "slo_ratio_tpot": ratio_tpot,
        "verdict": "met" if met else "violated",
        "throughput_tokens_per_s": m.throughput_tokens_per_s,
        "host_mem_bytes": m.host_mem_bytes,
        "gpu_mem_peak_bytes": m.gpu_mem_peak_bytes,
        "intervals": [[k, _token(i)] for k, i in out.intervals],
    })
    return entry


def _gpu_series(scenario: Scenario, run: CoordinatedRun, gpu_id: str) -> dict:
    doc = scenario.doc(gpu_id)
    memory, intervals = [], []
    for out in run.outcomes:
        if out.gpu_id != gpu_id or not out.admitted:
            continue
        total = out.request.shape.total_tokens
        for t in out.traces:
            point = [t.start_ms, gpu_memory_usage(doc.model, doc.gpu, t.plan, out.request.batch, total),
                     host_memory_bytes(doc.model, t.plan, total)]
            if not memory or memory[-1][1:] != point[1:]:
                memory.append(point)
            label = _token(t.label)
            if not intervals or intervals[-1][1] != label:
                intervals.append([t.start_ms, label])
        if out.traces:
            memory.append([out.traces[-1].end_ms, 0, 0])
            intervals.append([out.traces[-1].end_ms, None])
    return {"id": gpu_id, "model": doc.model.name, "memory_series": memory, "interval_series": intervals}


def bus_summary(segments: Sequence[BusSegment], bandwidth: float) -> dict:
    span = segments[-1].end_ms - segments[0].start_ms if segments else 0.0
    busy = sum(s.end_ms - s.start_ms for s in segments if s.active_transfers)
    moved = sum((s.end_ms - s.start_ms) * s.utilization for s in segments)
    return {
        "bandwidth_bytes_per_s": bandwidth,
        "makespan_ms": span,
        "busy_ms": busy,
        "mean_utilization": moved / span if span else 0.0,
    }


def build_report(scenario: Scenario, policy: str, run: CoordinatedRun, with_decisions: bool = False) -> dict:
    report = {
        "version": REPORT_VERSION,
        "scenario": scenario.name,
        "seed": scenario.seed,
        "policy": policy,
        "prefetch": scenario.knobs.prefetch.value,
        "requests": [request_entry(o) for o in run.outcomes],
        "gpus": [_gpu_series(scenario, run, g.id) for g in scenario.gpus],
        "bus": bus_summary(run.segments, scenario.bus.bandwidth_bytes_per_s),
    }
    if with_decisions:
        report["decisions"] = [dict(d) for d in run.decisions]
    return report


def any_violation(report: dict) -> bool:
    return any(r["verdict"] == "violated" for r in report["requests"])


def dump_json(obj) -> str:
    return json.dumps(obj, indent=1, allow_nan=False) + "\n"


def trace_events(run: CoordinatedRun) -> list[dict]:
    events = []
    for out in run.outcomes:
        for t in out.traces:
            for e in sorted(t.events, key=lambda e: (e.start_ms, e.stream, e.layer)):
                events.append({"gpu": out.gpu_id, "request": out.request.id, "iteration": t.index, **e.to_dict()})
    return events


# -- comparison table -------------------------------------------------------------------------

COMPARE_COLUMNS = ("policy", "request", "gpu", "status", "host_mem_bytes", "throughput_tokens_per_s",
                   "tpot_ms", "ttft_ms", "slo_ratio_tpot", "verdict")


def compare_rows(scenario: Scenario, record: Optional[PerformanceRecord] = None) -> list[dict]:
    rows = []
    for policy in ("naive", "deepspeed", "flexgen", "select-n"):
        try:
            report = build_report(scenario, policy, run_policy(scenario, policy, record))
        except NaiveInfeasible:
            for a in scenario.arrivals:
                rows.append({"policy": policy, "request": a.request.id, "gpu": a.gpu_id, "status": "infeasible"})
            continue
        for r in report["requests"]:
            rows.append({"policy": policy, "request": r["id"], "gpu": r["gpu"], "status": r["status"],
                         **{c: r.get(c) for c in COMPARE_COLUMNS[4:]}})
    return rows


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, COMPARE_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: ("" if row.get(c) is None else row.get(c)) for c in COMPARE_COLUMNS})
    return buf.getvalue()


def with_prefetch(scenario: Scenario, prefetch: Optional[str]) -> Scenario:
    if prefetch is None:
        return scenario
    return replace(scenario, knobs=replace(scenario.knobs, prefetch=Prefetch(prefetch)))
