"""Model, accelerator and bus descriptors plus per-layer latency profiles.

Every decoder layer is assumed to share one weight size and one compute time,
so a profile is a pair of tables (one per phase) keyed by ``(batch, seq_len)``
holding the compute time of a *single* layer in milliseconds.
"""

from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Mapping

PREFILL = "prefill"
DECODE = "decode"
PHASES = (PREFILL, DECODE)


class ProfileError(ValueError):
    """A profile document or table is malformed.

    ``key`` names the offending field or table entry.
    """

    def __init__(self, message: str, key: Any = None):
        super().__init__(f"{message} (at {key!r})" if key is not None else message)
        self.key = key


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int
    layer_weight_bytes: int
    kv_bytes_per_token_per_layer: int
    flops_per_token_per_layer: Mapping[str, float]
    max_position_tokens: int
    name: str = "model"

    def __post_init__(self):
        if self.num_layers < 1:
            raise ProfileError("num_layers must be >= 1", "num_layers")
        for attr in ("layer_weight_bytes", "kv_bytes_per_token_per_layer", "max_position_tokens"):
            if getattr(self, attr) < 0:
                raise ProfileError("must be >= 0", attr)
        flops = dict(self.flops_per_token_per_layer)
        if set(flops) != set(PHASES):
            raise ProfileError("flops_per_token_per_layer needs exactly prefill and decode", "flops_per_token_per_layer")
        if any(v < 0 for v in flops.values()):
            raise ProfileError("flops must be >= 0", "flops_per_token_per_layer")
        object.__setattr__(self, "flops_per_token_per_layer", MappingProxyType(flops))

    def __deepcopy__(self, memo):
        return self

    @property
    def total_weight_bytes(self) -> int:
        return self.num_layers * self.layer_weight_bytes


@dataclass(frozen=True)
class GpuSpec:
    mem_capacity_bytes: int
    peak_flops: float
    workspace_bytes: int = 0
    name: str = "gpu"

    def __post_init__(self):
        if not self.mem_capacity_bytes > self.workspace_bytes >= 0:
            raise ProfileError("need mem_capacity_bytes > workspace_bytes >= 0", "workspace_bytes")
        if self.peak_flops <= 0:
            raise ProfileError("peak_flops must be > 0", "peak_flops")


@dataclass(frozen=True)
class BusSpec:
    bandwidth_bytes_per_s: float
    gpu_count: int = 1

    def __post_init__(self):
        if self.bandwidth_bytes_per_s <= 0:
            raise ProfileError("bandwidth must be > 0", "bandwidth_bytes_per_s")
        if self.gpu_count < 1:
            raise ProfileError("gpu_count must be >= 1", "gpu_count")

    @property
    def bytes_per_ms(self) -> float:
        return self.bandwidth_bytes_per_s / 1000.0


def _check_monotone(phase: str, table: Mapping[tuple[int, int], float]) -> None:
    by_seq: dict[int, list[tuple[int, float]]] = {}
    by_batch: dict[int, list[tuple[int, float]]] = {}
    for (batch, seq), ms in table.items():
        by_seq.setdefault(seq, []).append((batch, ms))
        by_batch.setdefault(batch, []).append((seq, ms))
    for axis, groups in (("batch", by_seq), ("seq_len", by_batch)):
        for fixed, row in groups.items():
            row.sort()
            for (k0, t0), (k1, t1) in zip(row, row[1:]):
                if t1 < t0:
                    key = (phase, k1, fixed) if axis == "batch" else (phase, fixed, k1)
                    raise ProfileError(f"layer time decreases along {axis}", key)


@dataclass(frozen=True)
class LatencyProfile:
    """Per-layer compute time tables, ``phase -> {(batch, seq_len): ms}``."""

    phase_tables: Mapping[str, Mapping[tuple[int, int], float]]

    def __post_init__(self):
        frozen = {}
        for phase, table in self.phase_tables.items():
            if phase not in PHASES:
                raise ProfileError("unknown phase", phase)
            table = {(int(b), int(s)): float(ms) for (b, s), ms in table.items()}
            for key, ms in table.items():
                if key[0] < 1 or key[1] < 1:
                    raise ProfileError("batch and seq_len must be >= 1", (phase, *key))
                if not ms > 0:
                    raise ProfileError("layer_compute_ms must be > 0", (phase, *key))
            _check_monotone(phase, table)
            frozen[phase] = MappingProxyType(table)
        object.__setattr__(self, "phase_tables", MappingProxyType(frozen))

    def __deepcopy__(self, memo):
        return self

    def table(self, phase: str) -> Mapping[tuple[int, int], float]:
        table = self.phase_tables.get(phase)
        if not table:
            raise ProfileError("profile has no entries for phase", phase)
        return table

    def has_point(self, phase: str, batch: int, seq_len: int) -> bool:
        return (batch, seq_len) in self.phase_tables.get(phase, {})


def lookup_compute_time(profile: LatencyProfile, phase: str, batch: int, seq_len: int) -> float:
    """Per-layer compute time, rounding a missing key up in both dimensions.

    The answer is never below the time of any grid point the query dominates,
    which keeps every downstream latency estimate conservative.
    """
    table = profile.table(phase)
    exact = table.get((batch, seq_len))
    if exact is not None:
        return exact
    batches = sorted({b for b, _ in table})
    seqs = sorted({s for _, s in table})
    bi = bisect.bisect_left(batches, batch)
    si = bisect.bisect_left(seqs, seq_len)
    if bi == len(batches) or si == len(seqs):
        raise ProfileError("query exceeds profile grid", (phase, batch, seq_len))
    hit = table.get((batches[bi], seqs[si]))
    if hit is not None:
        return hit
    # sparse grid: smallest dominating point, batch first
    for b in batches[bi:]:
        for s in seqs[si:]:
            if (b, s) in table:
                return table[(b, s)]
    raise ProfileError("no grid point dominates query", (phase, batch, seq_len))


def layer_flops(model: ModelSpec, phase: str, batch: int, seq_len: int) -> float:
    # prefill touches every prompt token, decode one token per sequence
    tokens = batch * seq_len if phase == PREFILL else batch
    return model.flops_per_token_per_layer[phase] * tokens


def estimate_compute_time_peak(model: ModelSpec, gpu: GpuSpec, phase: str, batch: int, seq_len: int) -> float:
    """Per-layer time assuming the GPU runs at peak FLOP/s (a lower bound)."""
    return layer_flops(model, phase, batch, seq_len) * 1000.0 / gpu.peak_flops


def synth_profile(
    model: ModelSpec,
    gpu: GpuSpec,
    efficiency: float,
    batches: Iterable[int],
    seq_lens: Iterable[int],
    phases: Iterable[str] = PHASES,
) -> LatencyProfile:
    """Build an "actual" profile as the peak estimate divided by ``efficiency``."""
    if not 0 < efficiency <= 1:
        raise ValueError("efficiency must be in (0, 1]")
    batches, seq_lens = list(batches), list(seq_lens)
    if not batches or not seq_lens:
        raise ValueError("grid must be non-empty")
    tables = {
        phase: {
            (b, s): estimate_compute_time_peak(model, gpu, phase, b, s) / efficiency
            for b in batches
            for s in seq_lens
        }
        for phase in phases
    }
    return LatencyProfile(tables)


# -- documents ---------------------------------------------------------------

_MODEL_FIELDS = {
    "name", "num_layers", "layer_weight_bytes", "kv_bytes_per_token_per_layer",
    "flops_per_token_per_layer", "max_position_tokens",
}
_GPU_FIELDS = {"name", "mem_capacity_bytes", "peak_flops", "workspace_bytes"}
_ENTRY_FIELDS = {"batch", "seq_len", "layer_compute_ms"}


def _require_keys(obj: Any, allowed: set, required: set, where: str) -> None:
    if not isinstance(obj, Mapping):
        raise ProfileError("expected an object", where)
    unknown = set(obj) - allowed
    if unknown:
        raise ProfileError("unknown key", f"{where}.{sorted(unknown)[0]}")
    missing = required - set(obj)
    if missing:
        raise ProfileError("missing key", f"{where}.{sorted(missing)[0]}")


def model_from_dict(doc: Mapping) -> ModelSpec:
    _require_keys(doc, _MODEL_FIELDS, _MODEL_FIELDS - {"name"}, "model")
    return ModelSpec(**doc)


def model_to_dict(model: ModelSpec) -> dict:
    return {
        "name": model.name,
        "num_layers": model.num_layers,
        "layer_weight_bytes": model.layer_weight_bytes,
        "kv_bytes_per_token_per_layer": model.kv_bytes_per_token_per_layer,
        "flops_per_token_per_layer": dict(model.flops_per_token_per_layer),
        "max_position_tokens": model.max_position_tokens,
    }


def gpu_from_dict(doc: Mapping) -> GpuSpec:
    _require_keys(doc, _GPU_FIELDS, {"mem_capacity_bytes", "peak_flops"}, "gpu")
    return GpuSpec(**doc)


def gpu_to_dict(gpu: GpuSpec) -> dict:
    return {
        "name": gpu.name,
        "mem_capacity_bytes": gpu.mem_capacity_bytes,
        "peak_flops": gpu.peak_flops,
        "workspace_bytes": gpu.workspace_bytes,
    }


@dataclass(frozen=True)
class ProfileDocument:
    model: ModelSpec
    gpu: GpuSpec
    profile: LatencyProfile = field(repr=False)


def parse_profile_document(doc: Mapping) -> ProfileDocument:
    _require_keys(doc, {"model", "gpu", "phases"}, {"model", "gpu", "phases"}, "$")
    phases = doc["phases"]
    _require_keys(phases, set(PHASES), set(), "phases")
    tables: dict[str, dict[tuple[int, int], float]] = {}
    for phase, entries in phases.items():
        if not isinstance(entries, list):
            raise ProfileError("expected an array", f"phases.{phase}")
        table = tables.setdefault(phase, {})
        for n, entry in enumerate(entries):
            where = f"phases.{phase}[{n}]"
            _require_keys(entry, _ENTRY_FIELDS, _ENTRY_FIELDS, where)
            b, s, ms = entry["batch"], entry["seq_len"], entry["layer_compute_ms"]
            if not isinstance(b, int) or not isinstance(s, int) or isinstance(b, bool) or isinstance(s, bool):
                raise ProfileError("batch and seq_len must be integers", where)
            if not isinstance(ms, (int, float)) or isinstance(ms, bool):
                raise ProfileError("layer_compute_ms must be a number", where)
            if (b, s) in table:
                raise ProfileError("duplicate entry", (phase, b, s))
            table[(b, s)] = float(ms)
    return ProfileDocument(model_from_dict(doc["model"]), gpu_from_dict(doc["gpu"]), LatencyProfile(tables))


def load_profile(doc: Mapping) -> LatencyProfile:
    return parse_profile_document(doc).profile


def profile_to_dict(model: ModelSpec, gpu: GpuSpec, profile: LatencyProfile) -> dict:
    phases = {
        phase: [
            {"batch": b, "seq_len": s, "layer_compute_ms": ms}
            for (b, s), ms in sorted(table.items())
        ]
        for phase, table in profile.phase_tables.items()
    }
    return {"model": model_to_dict(model), "gpu": gpu_to_dict(gpu), "phases": phases}


def read_profile_file(path: str | Path) -> ProfileDocument:
    with open(path) as fh:
        return parse_profile_document(json.load(fh))


def write_profile_file(path: str | Path, model: ModelSpec, gpu: GpuSpec, profile: LatencyProfile) -> None:
    with open(path, "w") as fh:
        json.dump(profile_to_dict(model, gpu, profile), fh, indent=2, sort_keys=True)
        fh.write("\n")
