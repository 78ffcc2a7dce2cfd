"""Offline performance records: the smallest SLO-meeting interval per grid key.

Records are built from simulation at a fixed, uncontended bus bandwidth.  A
record maps ``(phase, slo_ms, batch, seq_len)`` to an interval or to
``INFEASIBLE``; lookups round batch and sequence length up and the SLO down,
so every answer is conservative.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .engine import BandwidthLike, Prefetch, as_schedule, decode_latency, prefill_latency
from .interval import INFEASIBLE, Interval, plan_from_interval
from .profiles import DECODE, PHASES, PREFILL, GpuSpec, LatencyProfile, ModelSpec

SLO_GRANULARITY_MS = 2


class RecordError(ValueError):
    def __init__(self, message: str, key=None):
        super().__init__(f"{message} (at {key!r})" if key is not None else message)
        self.key = key


def _is_pow2(n: int) -> bool:
    return isinstance(n, int) and n >= 1 and n & (n - 1) == 0


@dataclass(frozen=True)
class RecordMeta:
    model: str
    gpu: str
    policy: Prefetch
    kv_offload: bool
    slo_ms: tuple[int, ...]
    batch: tuple[int, ...]
    seq_len: tuple[int, ...]
    bandwidth_bytes_per_s: float
    buffer_slots: Optional[int] = None
    writeback_counted: bool = False

    def __post_init__(self):
        object.__setattr__(self, "policy", Prefetch(self.policy))
        for name in ("slo_ms", "batch", "seq_len"):
            values = tuple(sorted(set(getattr(self, name))))
            if not values:
                raise RecordError("grid axis is empty", name)
            object.__setattr__(self, name, values)
        for b in self.batch:
            if not _is_pow2(b):
                raise RecordError("batch sizes must be powers of two", ("batch", b))
        for s in self.seq_len:
            if not _is_pow2(s):
                raise RecordError("sequence lengths must be powers of two", ("seq_len", s))
        for slo in self.slo_ms:
            if isinstance(slo, bool) or not isinstance(slo, int) or slo <= 0 or slo % SLO_GRANULARITY_MS:
                raise RecordError(f"SLO buckets must be positive multiples of {SLO_GRANULARITY_MS} ms", ("slo_ms", slo))


@dataclass
class PerformanceRecord:
    meta: RecordMeta
    entries: dict[str, dict[tuple[int, int, int], Interval]] = field(default_factory=dict)
    simulations: int = field(default=0, compare=False)

    def get(self, phase: str, slo_ms: int, batch: int, seq_len: int) -> Interval:
        return self.entries[phase][(slo_ms, batch, seq_len)]

    @property
    def phases(self) -> tuple[str, ...]:
        return tuple(p for p in PHASES if p in self.entries)

    def __len__(self) -> int:
        return sum(len(t) for t in self.entries.values())


class PhaseLatency:
    """Memoised uncontended phase latency for one (model, profile, policy) setup."""

    def __init__(self, profile: LatencyProfile, model: ModelSpec, meta: RecordMeta):
        self.profile = profile
        self.model = model
        self.meta = meta
        self.bandwidth = as_schedule(meta.bandwidth_bytes_per_s)
        self.cache: dict[tuple, float] = {}
        self.simulations = 0

    def __call__(self, phase: str, batch: int, seq_len: int, i: Interval) -> float:
        key = (phase, batch, seq_len, i)
        if key not in self.cache:
            m = self.meta
            plan = plan_from_interval(self.model, i, m.policy, m.kv_offload,
                                      buffer_slots=m.buffer_slots, writeback_counted=m.writeback_counted)
            if phase == PREFILL:
                value = prefill_latency(self.profile, self.model, plan, batch, seq_len, self.bandwidth)
            else:
                value = decode_latency(self.profile, self.model, plan, batch, seq_len, self.bandwidth)
            self.simulations += 1
            self.cache[key] = value
        return self.cache[key]


def smallest_meeting_interval(latency: PhaseLatency, phase: str, slo_ms: float, batch: int, seq_len: int) -> Interval:
    for i in range(1, latency.model.num_layers + 1):
        if latency(phase, batch, seq_len, i) <= slo_ms:
            return i
    return INFEASIBLE


def build_record(
    profile: LatencyProfile,
    model: ModelSpec,
    gpu: GpuSpec,
    slo_list: Iterable[int],
    batch_list: Iterable[int],
    seq_list: Iterable[int],
    policy: Prefetch | str = Prefetch.INTERVAL_START,
    kv_offload: bool = False,
    *,
    bandwidth: BandwidthLike,
    phases: Iterable[str] = PHASES,
    buffer_slots: Optional[int] = None,
    writeback_counted: bool = False,
) -> PerformanceRecord:
    """Ascending scan from interval 1 at every grid key, per phase.

    ``bandwidth`` is the uncontended bus rate the record assumes.
    """
    bw = bandwidth.bandwidth_bytes_per_s if hasattr(bandwidth, "bandwidth_bytes_per_s") else float(bandwidth)
    meta = RecordMeta(model.name, gpu.name, Prefetch(policy), kv_offload, tuple(slo_list), tuple(batch_list),
                      tuple(seq_list), bw, buffer_slots, writeback_counted)
    record = PerformanceRecord(meta)
    latency = PhaseLatency(profile, model, meta)
    for phase in phases:
        for b in meta.batch:
            for s in meta.seq_len:
                if not profile.has_point(phase, b, s):
                    raise RecordError("profile lacks grid point", (phase, b, s))
        table = record.entries.setdefault(phase, {})
        for slo in meta.slo_ms:
            for b in meta.batch:
                for s in meta.seq_len:
                    table[(slo, b, s)] = smallest_meeting_interval(latency, phase, slo, b, s)
    record.simulations = latency.simulations
    return record


def _round_up(grid: tuple[int, ...], value: int) -> Optional[int]:
    k = bisect.bisect_left(grid, value)
    return grid[k] if k < len(grid) else None


def _round_down(grid: tuple[int, ...], value: float) -> Optional[int]:
    k = bisect.bisect_right(grid, value)
    return grid[k - 1] if k > 0 else None


def lookup_key(record: PerformanceRecord, slo_ms: float, batch: int, seq_len: int) -> Optional[tuple[int, int, int]]:
    m = record.meta
    b = _round_up(m.batch, batch)
    s = _round_up(m.seq_len, seq_len)
    slo = _round_down(m.slo_ms, slo_ms)
    if b is None or s is None or slo is None:
        return None
    return slo, b, s


def lookup_interval(record: PerformanceRecord, phase: str, slo_ms: float, batch: int, seq_len: int) -> Interval:
    """Interval for a query; keys outside the grid are refused as INFEASIBLE."""
    if phase not in record.entries:
        raise RecordError("record does not cover phase", phase)
    key = lookup_key(record, slo_ms, batch, seq_len)
    if key is None:
        return INFEASIBLE
    return record.entries[phase].get(key, INFEASIBLE)


# -- documents -------------------------------------------------------------------

_META_FIELDS = {"model", "gpu", "policy", "kv_offload", "grid", "bandwidth_bytes_per_s", "buffer_slots",
                "writeback_counted"}
_GRID_FIELDS = {"slo_ms", "batch", "seq_len"}
_ENTRY_FIELDS = {"phase", "slo_ms", "batch", "seq_len", "interval"}


def record_to_dict(record: PerformanceRecord) -> dict:
    m = record.meta
    entries = []
    for phase in record.phases:
        for (slo, b, s), i in sorted(record.entries[phase].items()):
            entries.append({"phase": phase, "slo_ms": slo, "batch": b, "seq_len": s,
                            "interval": "infeasible" if i is INFEASIBLE else i})
    return {
        "meta": {
            "model": m.model,
            "gpu": m.gpu,
            "policy": m.policy.value,
            "kv_offload": m.kv_offload,
            "grid": {"slo_ms": list(m.slo_ms), "batch": list(m.batch), "seq_len": list(m.seq_len)},
            "bandwidth_bytes_per_s": m.bandwidth_bytes_per_s,
            "buffer_slots": m.buffer_slots,
            "writeback_counted": m.writeback_counted,
        },
        "entries": entries,
    }


def _check_keys(obj, allowed, required, where):
    if not isinstance(obj, Mapping):
        raise RecordError("expected an object", where)
    extra = set(obj) - allowed
    if extra:
        raise RecordError("unknown key", f"{where}.{sorted(extra)[0]}")
    missing = required - set(obj)
    if missing:
        raise RecordError("missing key", f"{where}.{sorted(missing)[0]}")


def record_from_dict(doc: Mapping) -> PerformanceRecord:
    _check_keys(doc, {"meta", "entries"}, {"meta", "entries"}, "$")
    raw = doc["meta"]
    _check_keys(raw, _META_FIELDS, _META_FIELDS - {"buffer_slots", "writeback_counted"}, "meta")
    _check_keys(raw["grid"], _GRID_FIELDS, _GRID_FIELDS, "meta.grid")
    try:
        policy = Prefetch(raw["policy"])
    except ValueError:
        raise RecordError("unknown policy", "meta.policy") from None
    meta = RecordMeta(raw["model"], raw["gpu"], policy, bool(raw["kv_offload"]),
                      tuple(raw["grid"]["slo_ms"]), tuple(raw["grid"]["batch"]), tuple(raw["grid"]["seq_len"]),
                      raw["bandwidth_bytes_per_s"], raw.get("buffer_slots"), bool(raw.get("writeback_counted", False)))
    record = PerformanceRecord(meta)
    if not isinstance(doc["entries"], list):
        raise RecordError("expected an array", "entries")
    for n, e in enumerate(doc["entries"]):
        where = f"entries[{n}]"
        _check_keys(e, _ENTRY_FIELDS, _ENTRY_FIELDS, where)
        if e["phase"] not in PHASES:
            raise RecordError("unknown phase", f"{where}.phase")
        key = (e["slo_ms"], e["batch"], e["seq_len"])
        if key[0] not in meta.slo_ms or key[1] not in meta.batch or key[2] not in meta.seq_len:
            raise RecordError("entry outside the declared grid", where)
        value = e["interval"]
        if value == "infeasible":
            value = INFEASIBLE
        elif isinstance(value, bool) or not isinstance(value, int) or value < 1:
            raise RecordError("interval must be a positive integer or \"infeasible\"", f"{where}.interval")
        table = record.entries.setdefault(e["phase"], {})
        if key in table:
            raise RecordError("duplicate entry", where)
        table[key] = value
    return record


def write_record(path: str | Path, record: PerformanceRecord) -> None:
    with open(path, "w") as fh:
        json.dump(record_to_dict(record), fh, indent=1)
        fh.write("\n")


def read_record(path: str | Path) -> PerformanceRecord:
    with open(path) as fh:
        return record_from_dict(json.load(fh))
