"""Seeded random two-GPU bus scenarios with exactly representable timings."""

from __future__ import annotations

import random
from dataclasses import dataclass

from slo_offload.analyzer import build_record
from slo_offload.coordinator import Arrival, Coordinator, GpuContext, ServiceRequest
from slo_offload.engine import Prefetch
from slo_offload.profiles import DECODE, PHASES, PREFILL, BusSpec, GpuSpec, LatencyProfile, ModelSpec

BUS_BW = 24e9  # 24 MB per ms
BATCHES = (1, 2, 4, 8)
SEQS = (16, 32, 64)


@dataclass
class RandomScenario:
    seed: int
    bus: BusSpec
    contexts: list
    arrivals: list
    policy: Prefetch

    def coordinator(self, **kwargs) -> Coordinator:
        return Coordinator(self.bus, self.contexts, **kwargs)


def _profile(rng: random.Random) -> LatencyProfile:
    base = rng.choice((0.5, 1.0, 1.5, 2.0, 3.0))
    step = rng.choice((0.0, 0.25, 0.5))
    decode, prefill = {}, {}
    for bi, b in enumerate(BATCHES):
        for si, s in enumerate(SEQS):
            decode[(b, s)] = base + step * (bi + si)
            prefill[(b, s)] = 4 * (base + step * (bi + si)) * (si + 1)
    return LatencyProfile({DECODE: decode, PREFILL: prefill})


def random_scenario(seed: int, gpu_count: int = 2) -> RandomScenario:
    rng = random.Random(seed)
    policy = rng.choice((Prefetch.INTERVAL_START, Prefetch.EAGER))
    bus = BusSpec(BUS_BW, gpu_count)
    contexts, arrivals = [], []
    for g in range(gpu_count):
        L = rng.randint(3, 12)
        w = rng.choice((30_000_000, 60_000_000, 120_000_000))
        model = ModelSpec(L, w, 0, {PREFILL: 1.0, DECODE: 1.0}, 4096, name=f"m{g}")
        workspace = 1_000_000_000
        cap = workspace + rng.randint(L // 2 + 1, L + 2) * w + 2 * w
        gpu = GpuSpec(cap, 1e12, workspace, name=f"g{g}")
        profile = _profile(rng)
        phase_split = rng.random() < 0.75
        reqs = []
        for k in range(rng.randint(1, 3)):
            b, s = rng.choice(BATCHES), rng.choice(SEQS)
            c = profile.phase_tables[DECODE][(b, s)]
            tpot = 2 * rng.randint(max(1, int(L * c / 2)), int(L * c * 2) + 2)
            ttft = None
            if not phase_split:
                p = profile.phase_tables[PREFILL][(b, s)]
                ttft = 2 * rng.randint(max(1, int(L * p / 2)), int(L * p * 2) + 2)
            req = ServiceRequest(f"g{g}r{k}", b, s, rng.randint(2, 20), float(tpot), None if ttft is None else float(ttft))
            reqs.append(req)
            arrivals.append(Arrival(f"gpu{g}", req, rng.randint(0, 120) * 0.5))
        slos = sorted({int(r.tpot_slo_ms) for r in reqs} | {int(r.ttft_slo_ms) for r in reqs if r.ttft_slo_ms})
        phases = (DECODE,) if phase_split else PHASES
        batches = sorted({r.batch for r in reqs})
        seqs = sorted({r.seq_len for r in reqs})
        records = {
            n: build_record(profile, model, gpu, slos, batches, seqs, policy, bandwidth=BUS_BW / n, phases=phases)
            for n in range(1, gpu_count + 1)
        }
        contexts.append(GpuContext(f"gpu{g}", model, gpu, records, phase_split, profile))
    arrivals.sort(key=lambda a: (a.arrival_ms, a.request.id))
    return RandomScenario(seed, bus, contexts, arrivals, policy)
