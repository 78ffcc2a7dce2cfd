import functools
import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import MB, TP1_BW, flat_profile, tp1_gpu, tp1_model
from oracles import ascending_scan, phase_latency
from slo_offload.analyzer import (
    PerformanceRecord,
    RecordError,
    RecordMeta,
    build_record,
    lookup_interval,
    lookup_key,
    read_record,
    record_from_dict,
    record_to_dict,
    write_record,
)
from slo_offload.engine import Prefetch
from slo_offload.interval import INFEASIBLE, plan_from_interval
from slo_offload.profiles import DECODE, PREFILL, LatencyProfile


def tp1_record(slos=(20,), batches=(8,), seqs=(64,), policy=Prefetch.INTERVAL_START, phases=(DECODE,), **kw):
    return build_record(flat_profile(), tp1_model(), tp1_gpu(), slos, batches, seqs, policy,
                        bandwidth=TP1_BW, phases=phases, **kw)


def test_tp1_interval_start_entry_is_3():
    assert tp1_record().get(DECODE, 20, 8, 64) == 3


def test_tp1_eager_entry_is_2():
    assert tp1_record(policy=Prefetch.EAGER).get(DECODE, 20, 8, 64) == 2


def test_unmeetable_slo_is_stored_infeasible():
    # 14 ms is below the 16 ms no-offload iteration
    record = tp1_record(slos=(14, 20))
    assert record.get(DECODE, 14, 8, 64) is INFEASIBLE
    assert len(record) == 2


def test_prefill_entries_are_built_per_phase():
    record = tp1_record(slos=(64, 70), phases=(PREFILL, DECODE))
    assert record.phases == (PREFILL, DECODE)
    # one buffer slot: at interval 1 every copy waits for the previous layer (8 * 13 ms);
    # at interval 2 each copy hides under its interval's first layer (64 ms)
    assert record.get(PREFILL, 64, 8, 64) == 2
    assert record.get(PREFILL, 70, 8, 64) == 2
    assert record.get(DECODE, 64, 8, 64) == 1


def test_missing_profile_point_is_reported():
    profile = LatencyProfile({DECODE: {(8, 64): 2.0}})
    with pytest.raises(RecordError) as err:
        build_record(profile, tp1_model(), tp1_gpu(), [20], [8, 16], [64], bandwidth=TP1_BW, phases=[DECODE])
    assert err.value.key == (DECODE, 16, 64)


@pytest.mark.parametrize("axis, values", [("batch", (6,)), ("seq_len", (48,)), ("slo_ms", (21,)),
                                          ("slo_ms", ()), ("slo_ms", (0,))])
def test_meta_validates_grid(axis, values):
    grid = {"slo_ms": (20,), "batch": (8,), "seq_len": (64,)}
    grid[axis] = values
    with pytest.raises(RecordError):
        RecordMeta("m", "g", Prefetch.EAGER, False, grid["slo_ms"], grid["batch"], grid["seq_len"], TP1_BW)


def test_build_counts_simulations():
    record = tp1_record(slos=(20, 40))
    # 20 ms scans 1, 2, 3; 40 ms reuses interval 1's memoised latency
    assert record.simulations == 3


# -- oracle checks --------------------------------------------------------------------------


tp1_variants = st.builds(
    dict,
    decode_ms=st.sampled_from((0.5, 1.0, 2.0, 3.0)),
    weight_mb=st.sampled_from((30, 60, 120, 240)),
    layers=st.integers(2, 10),
    policy=st.sampled_from((Prefetch.INTERVAL_START, Prefetch.EAGER)),
)


@settings(max_examples=25)
@given(tp1_variants, st.sets(st.sampled_from((4, 8, 12, 16, 20, 24, 32, 48)), min_size=1, max_size=3))
def test_every_entry_is_minimal(v, slos):
    model = tp1_model(num_layers=v["layers"], layer_weight_bytes=v["weight_mb"] * MB)
    profile = flat_profile(v["decode_ms"])
    record = build_record(profile, model, tp1_gpu(), sorted(slos), [8], [64], v["policy"],
                          bandwidth=TP1_BW, phases=[DECODE])
    for (slo, b, s), i in record.entries[DECODE].items():
        expected = ascending_scan(profile, model, v["policy"], DECODE, slo, b, s, TP1_BW)
        assert i == expected
        if i is INFEASIBLE:
            continue
        meets = phase_latency(profile, model, plan_from_interval(model, i, v["policy"]), DECODE, b, s, TP1_BW)
        assert meets <= slo
        if i > 1:
            below = plan_from_interval(model, i - 1, v["policy"])
            assert phase_latency(profile, model, below, DECODE, b, s, TP1_BW) > slo


@settings(max_examples=20)
@given(tp1_variants)
def test_looser_slo_never_needs_larger_interval(v):
    model = tp1_model(num_layers=v["layers"], layer_weight_bytes=v["weight_mb"] * MB)
    slos = list(range(2, 62, 4))
    record = build_record(flat_profile(v["decode_ms"]), model, tp1_gpu(), slos, [8], [64], v["policy"],
                          bandwidth=TP1_BW, phases=[DECODE])
    rank = lambda i: float("inf") if i is INFEASIBLE else i
    entries = [rank(record.get(DECODE, slo, 8, 64)) for slo in slos]
    assert all(a >= b for a, b in zip(entries, entries[1:]))


# -- lookup ------------------------------------------------------------------------------------


GRID_PROFILE = LatencyProfile({DECODE: {(b, s): 0.5 * b * s / 256 for b in (4, 8, 16) for s in (64, 128, 256)}})


@functools.lru_cache(maxsize=None)
def grid_record():
    return build_record(GRID_PROFILE, tp1_model(), tp1_gpu(), [10, 20, 40], [4, 8, 16], [64, 128, 256],
                        Prefetch.EAGER, bandwidth=TP1_BW, phases=[DECODE])


def test_lookup_exact_hit():
    record = grid_record()
    assert lookup_interval(record, DECODE, 20, 8, 128) == record.get(DECODE, 20, 8, 128)


def test_lookup_rounding_rule():
    record = grid_record()
    assert lookup_key(record, 21, 12, 200) == (20, 16, 256)
    assert lookup_interval(record, DECODE, 21, 12, 200) == record.get(DECODE, 20, 16, 256)


@pytest.mark.parametrize("query", [(20, 32, 64), (20, 8, 512), (8, 8, 64)])
def test_lookup_outside_grid_is_infeasible(query):
    assert lookup_interval(grid_record(), DECODE, *query) is INFEASIBLE


def test_lookup_unknown_phase():
    with pytest.raises(RecordError):
        lookup_interval(grid_record(), PREFILL, 20, 8, 64)


@given(st.floats(10, 60), st.integers(1, 16), st.integers(1, 256))
def test_lookup_is_conservative(slo, batch, seq):
    record = grid_record()
    profile = GRID_PROFILE
    i = lookup_interval(record, DECODE, slo, batch, seq)
    if i is INFEASIBLE:
        return
    rslo, rb, rs = lookup_key(record, slo, batch, seq)
    plan = plan_from_interval(tp1_model(), i, Prefetch.EAGER)
    assert phase_latency(profile, tp1_model(), plan, DECODE, rb, rs, TP1_BW) <= rslo <= slo


# -- documents -----------------------------------------------------------------------------------


def test_round_trip_identity(tmp_path):
    record = tp1_record(slos=(14, 20, 40), batches=(4, 8), seqs=(32, 64))
    path = tmp_path / "record.json"
    write_record(path, record)
    again = read_record(path)
    assert again == record
    assert record_to_dict(again) == record_to_dict(record)


def test_infeasible_token():
    doc = record_to_dict(tp1_record(slos=(14,)))
    assert doc["entries"][0]["interval"] == "infeasible"
    assert set(doc["meta"]) >= {"model", "gpu", "policy", "kv_offload", "grid"}


def test_serialized_lookups_match_in_memory():
    record = grid_record()
    again = record_from_dict(json.loads(json.dumps(record_to_dict(record))))
    rng = random.Random(1234)
    for _ in range(1000):
        q = (rng.uniform(1, 70), rng.randint(1, 40), rng.randint(1, 600))
        assert lookup_interval(again, DECODE, *q) == lookup_interval(record, DECODE, *q)


@pytest.mark.parametrize("mutate, key", [
    (lambda d: d.update(extra=1), "$.extra"),
    (lambda d: d["meta"].pop("policy"), "meta.policy"),
    (lambda d: d["meta"].update(policy="sideways"), "meta.policy"),
    (lambda d: d["entries"][0].update(interval=0), "entries[0].interval"),
    (lambda d: d["entries"][0].update(phase="warmup"), "entries[0].phase"),
    (lambda d: d["entries"][0].update(batch=16), "entries[0]"),
    (lambda d: d["entries"].append(dict(d["entries"][0])), "entries[1]"),
])
def test_document_errors_name_the_key(mutate, key):
    doc = record_to_dict(tp1_record())
    mutate(doc)
    with pytest.raises(RecordError) as err:
        record_from_dict(doc)
    assert err.value.key == key


def test_empty_record_len():
    meta = RecordMeta("m", "g", Prefetch.EAGER, False, (20,), (8,), (64,), TP1_BW)
    assert len(PerformanceRecord(meta)) == 0
