"""Independent reference computations the library is checked against."""

from __future__ import annotations

import itertools
import math

from slo_offload.engine import decode_latency, gpu_memory_usage, prefill_latency
from slo_offload.interval import INFEASIBLE, NO_OFFLOAD, plan_from_interval
from slo_offload.profiles import DECODE, PREFILL


def timeline_duration(num_layers: int, compute_ms: float, transfer_ms: float, offloaded, policy: str,
                      slots: int = 1) -> float:
    """Hand recurrence for one cold iteration on an uncontended bus.

    Layers compute in order; the copy stream moves offloaded layers in order,
    each starting once its anchor layer has begun computing, the previous copy
    is done, and a buffer slot is free (slots free when the layer that held
    them finishes computing).
    """
    off = sorted(offloaded)
    cs, ce = {0: 0.0}, {0: 0.0}
    ready, copy_free = {}, 0.0
    for j in range(1, num_layers + 1):
        if j in off:
            pos = off.index(j)
            prev = off[pos - 1] if pos else 0
            if policy == "interval_start":
                anchor = min(prev + 1, j - 1)
            elif policy == "one_ahead":
                anchor = j - 1
            else:
                raise ValueError(policy)
            slot_free = ce[off[pos - slots]] if pos >= slots else 0.0
            start = max(cs[anchor], copy_free, slot_free)
            ready[j] = copy_free = start + transfer_ms
            cs[j] = max(ce[j - 1], ready[j])
        else:
            cs[j] = ce[j - 1]
        ce[j] = cs[j] + compute_ms
    return ce[num_layers]


def phase_latency(profile, model, plan, phase, batch, seq, bandwidth) -> float:
    if phase == PREFILL:
        return prefill_latency(profile, model, plan, batch, seq, bandwidth)
    return decode_latency(profile, model, plan, batch, seq, bandwidth)


def ascending_scan(profile, model, policy, phase, slo, batch, seq, bandwidth, kv_offload=False):
    for i in range(1, model.num_layers + 1):
        plan = plan_from_interval(model, i, policy, kv_offload)
        if phase_latency(profile, model, plan, phase, batch, seq, bandwidth) <= slo:
            return i
    return INFEASIBLE


def rank(i) -> float:
    return math.inf if i is NO_OFFLOAD else i


class CoordinatorOracle:
    """Brute-force admission over every interval combination.

    Bounds come from fresh simulations, not from the coordinator's records:
    the minimum at sharing level n is an ascending scan at ``bandwidth / n``,
    the maximum is a descending memory scan.
    """

    def __init__(self, contexts, bus_bandwidth: float, share_check: bool = True):
        self.ctx = {c.gpu_id: c for c in contexts}
        self.bw = bus_bandwidth
        self.share_check = share_check
        self._min = {}

    def min_interval(self, gpu_id, req, level=1):
        key = (gpu_id, req, level)
        if key not in self._min:
            c = self.ctx[gpu_id]
            m = c.meta
            phases = [DECODE] if c.phase_split else [PREFILL, DECODE]
            worst = 1
            for ph in phases:
                slo = req.tpot_slo_ms if ph == DECODE else req.ttft_slo_ms
                i = ascending_scan(c.profile, c.model, m.policy, ph, slo, req.batch, req.seq_len,
                                   self.bw / level, m.kv_offload)
                if i is INFEASIBLE:
                    worst = INFEASIBLE
                    break
                worst = max(worst, i)
            self._min[key] = worst
        return self._min[key]

    def max_interval(self, gpu_id, req):
        c = self.ctx[gpu_id]
        total = req.batch * (req.seq_len + req.output_len)
        for i in [NO_OFFLOAD, *range(c.model.num_layers, 0, -1)]:
            plan = plan_from_interval(c.model, i, c.meta.policy, c.meta.kv_offload)
            if gpu_memory_usage(c.model, c.gpu, plan, req.batch, total) <= c.gpu.mem_capacity_bytes:
                return i
        return INFEASIBLE

    def _offloaded(self, gpu_id, i) -> int:
        return 0 if i is NO_OFFLOAD else self.ctx[gpu_id].model.num_layers // i

    def _host(self, gpu_id, i) -> int:
        return self._offloaded(gpu_id, i) * self.ctx[gpu_id].model.layer_weight_bytes

    def _rate(self, gpu_id, req, i) -> float:
        nbytes = self._offloaded(gpu_id, i) * self.ctx[gpu_id].model.layer_weight_bytes
        rate = nbytes * 1000.0 / req.tpot_slo_ms
        if not self.ctx[gpu_id].phase_split:
            rate = max(rate, nbytes * 1000.0 / req.ttft_slo_ms)
        return rate

    def valid(self, assignment, requests) -> bool:
        if sum(self._rate(g, requests[g], i) for g, i in assignment.items()) > self.bw:
            return False
        if self.share_check:
            sharing = [g for g, i in assignment.items() if self._offloaded(g, i)]
            if len(sharing) >= 2:
                for g in sharing:
                    floor = self.min_interval(g, requests[g], len(sharing))
                    if floor is INFEASIBLE or rank(assignment[g]) < rank(floor):
                        return False
        return True

    def best_host_memory(self, requests):
        """Largest host memory over valid combinations, or None if there is none."""
        ids = sorted(requests)
        ranges = []
        for g in ids:
            lo, hi = self.min_interval(g, requests[g]), self.max_interval(g, requests[g])
            if lo is INFEASIBLE or hi is INFEASIBLE:
                return None
            L = self.ctx[g].model.num_layers
            ranges.append([i for i in [*range(1, L + 1), NO_OFFLOAD] if rank(lo) <= rank(i) <= rank(hi)])
        best = None
        for combo in itertools.product(*ranges):
            assignment = dict(zip(ids, combo))
            if self.valid(assignment, requests):
                host = sum(self._host(g, i) for g, i in assignment.items())
                best = host if best is None else max(best, host)
        return best


def record_admissions(coordinator):
    """Wrap ``coordinator.admit`` to log (requests in play, target, decision)."""
    log = []
    inner = coordinator.admit

    def admit(gpu_id, request):
        active = {g: s.active_request for g, s in coordinator.state.gpus.items() if s.active}
        decision = inner(gpu_id, request)
        log.append((dict(active, **{gpu_id: request}), gpu_id, decision))
        return decision

    coordinator.admit = admit
    return log

