import copy
import json

import pytest

from conftest import SCENARIOS
from slo_offload.harness import (
    NaiveInfeasible,
    ScenarioError,
    any_violation,
    build_report,
    compare_rows,
    derived_grid,
    dump_json,
    load_scenario,
    rows_to_csv,
    run_policy,
    scenario_from_dict,
    trace_events,
    with_prefetch,
)


def report_for(name, policy="select-n", prefetch=None):
    scenario = with_prefetch(load_scenario(SCENARIOS / name), prefetch)
    return build_report(scenario, policy, run_policy(scenario, policy), policy == "select-n")


def by_id(report):
    return {r["id"]: r for r in report["requests"]}


def raw(name):
    return json.loads((SCENARIOS / name).read_text())


# -- scenario documents ----------------------------------------------------------------------


def test_derived_grid_rounds_to_pow2_and_even_slo():
    scenario = load_scenario(SCENARIOS / "tp1_pair.json")
    assert derived_grid(scenario, "tp1") == {"slo_ms": [10, 20], "batch": [8], "seq_len": [64]}


@pytest.mark.parametrize("mutate, match", [
    (lambda d: d.update(version=2), "version"),
    (lambda d: d.update(extra=1), "extra"),
    (lambda d: d["requests"][0].update(gpu="gpu9"), "unknown gpu"),
    (lambda d: d["requests"].append(dict(d["requests"][0])), "duplicate id"),
    (lambda d: d["gpus"][0].update(profile="nope"), "unknown profile"),
    (lambda d: d["gpus"][0].update(phase_split=False), "TTFT"),
    (lambda d: d["requests"][0].update(batch=0), "batch"),
    (lambda d: d["policy"].update(sideways=True), "sideways"),
])
def test_scenario_errors(mutate, match):
    doc = raw("tp1_single.json")
    doc.setdefault("policy", {})
    mutate(doc)
    with pytest.raises(ScenarioError, match=match):
        scenario_from_dict(doc, SCENARIOS)


# -- runs and reports ----------------------------------------------------------------------------


def test_single_gpu_select_n_meets_and_deepspeed_violates():
    sn = by_id(report_for("tp1_single.json"))["r0"]
    ds = by_id(report_for("tp1_single.json", "deepspeed"))["r0"]
    assert sn["slo_ratio_tpot"] <= 1.0 and sn["verdict"] == "met"
    assert ds["tpot_ms"] == 40.0 and ds["slo_ratio_tpot"] == 2.0 and ds["verdict"] == "violated"


def test_report_has_schema_fields():
    report = report_for("tp1_pair.json")
    assert set(report) >= {"requests", "gpus", "bus", "decisions"}
    for r in report["requests"]:
        assert set(r) >= {"id", "ttft_ms", "tpot_ms", "slo_ratio_ttft", "slo_ratio_tpot", "verdict"}
    assert all("interval_series" in g for g in report["gpus"])


def test_rejected_request_has_no_verdict_numbers():
    r2 = by_id(report_for("tp1_pair.json"))["r2"]
    assert r2["verdict"] == "rejected" and r2["tpot_ms"] is None and r2["slo_ratio_tpot"] is None


def test_coordinated_pair_meets_both_slos():
    report = report_for("tp1_pair.json")
    reqs = by_id(report)
    assert reqs["r0"]["verdict"] == reqs["r1"]["verdict"] == "met"
    assert not any_violation(report)
    admits = [d for d in report["decisions"] if d["event"] == "admit"]
    assert admits[1]["assignments"] == {"gpu0": "none", "gpu1": 3}


def test_gpu0_interval_series_tracks_the_switch():
    gpu0 = report_for("tp1_pair.json")["gpus"][0]
    labels = [label for _, label in gpu0["interval_series"]]
    assert labels == [3, "none", 3, None]


def test_contention_flexgen_violates_small_batches_only():
    flex = by_id(report_for("contention.json", "flexgen"))
    sn = by_id(report_for("contention.json"))
    for rid, r in flex.items():
        small = rid.startswith(("b8", "b16"))
        assert (r["verdict"] == "violated") == small
    assert all(r["verdict"] == "met" for r in sn.values())


def test_transfer_bound_deepspeed_slowdown():
    ds = by_id(report_for("transfer_bound_deepspeed.json", "deepspeed"))["r0"]
    naive = by_id(report_for("transfer_bound_deepspeed.json", "naive"))["r0"]
    assert ds["steady_tpot_ms"] / naive["steady_tpot_ms"] == pytest.approx(18.128 / 1.312, rel=1e-9)


def test_naive_infeasible_raises_and_compare_marks_it():
    doc = raw("tp1_single.json")
    profile = json.loads((SCENARIOS / "profiles" / "tp1.json").read_text())
    profile["gpu"]["mem_capacity_bytes"] = 1_500_000_000
    doc["profiles"]["tp1"] = profile
    scenario = scenario_from_dict(doc, SCENARIOS)
    with pytest.raises(NaiveInfeasible):
        run_policy(scenario, "naive")
    rows = [r for r in compare_rows(scenario) if r["policy"] == "naive"]
    assert rows and all(r["status"] == "infeasible" for r in rows)
    assert ",,," in rows_to_csv(rows).splitlines()[1]


def test_compare_host_memory_ratio_is_two_and_a_half():
    rows = {r["policy"]: r for r in compare_rows(load_scenario(SCENARIOS / "efficiency_half.json"))}
    assert rows["select-n"]["host_mem_bytes"] / rows["flexgen"]["host_mem_bytes"] == pytest.approx(2.5)
    assert rows["select-n"]["verdict"] == rows["flexgen"]["verdict"] == "met"


def test_compare_throughput_ratio_follows_deepspeed_slowdown():
    rows = {r["policy"]: r for r in compare_rows(load_scenario(SCENARIOS / "efficiency_half.json"))}
    ratio = rows["naive"]["throughput_tokens_per_s"] / rows["deepspeed"]["throughput_tokens_per_s"]
    slowdown = rows["deepspeed"]["tpot_ms"] / rows["naive"]["tpot_ms"]
    assert ratio == pytest.approx(slowdown, rel=0.01)


def test_reports_and_traces_are_deterministic():
    for name in ("tp1_pair.json", "contention.json"):
        a = load_scenario(SCENARIOS / name)
        b = load_scenario(SCENARIOS / name)
        ra, rb = run_policy(a, "select-n"), run_policy(b, "select-n")
        assert dump_json(build_report(a, "select-n", ra, True)) == dump_json(build_report(b, "select-n", rb, True))
        assert json.dumps(trace_events(ra)) == json.dumps(trace_events(rb))


def test_prefetch_override():
    scenario = load_scenario(SCENARIOS / "tp1_single.json")
    assert with_prefetch(scenario, None) is scenario
    eager = with_prefetch(copy.deepcopy(scenario), "eager")
    assert eager.knobs.prefetch.value == "eager"
    assert by_id(report_for("tp1_single.json", prefetch="eager"))["r0"]["intervals"][0][1] == 2
