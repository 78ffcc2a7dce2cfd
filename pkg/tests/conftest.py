import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from slo_offload.profiles import DECODE, PREFILL, BusSpec, GpuSpec, LatencyProfile, ModelSpec  # noqa: E402

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"

MB = 1_000_000
GB = 1_000_000_000
TP1_BW = 24e9  # 120 MB moves in 5 ms


def tp1_model(**kw) -> ModelSpec:
    args = dict(num_layers=8, layer_weight_bytes=120 * MB, kv_bytes_per_token_per_layer=65536,
                flops_per_token_per_layer={PREFILL: 1e9, DECODE: 1e9}, max_position_tokens=2048, name="tp1")
    args.update(kw)
    return ModelSpec(**args)


def tp1_gpu(**kw) -> GpuSpec:
    args = dict(mem_capacity_bytes=24 * GB, peak_flops=8e12, workspace_bytes=1 * GB, name="toy")
    args.update(kw)
    return GpuSpec(**args)


def flat_profile(decode_ms: float = 2.0, prefill_ms: float = 8.0, batches=(1, 2, 4, 8, 16, 32, 64),
                 seqs=(16, 32, 64, 128, 256)) -> LatencyProfile:
    return LatencyProfile({
        DECODE: {(b, s): decode_ms for b in batches for s in seqs},
        PREFILL: {(b, s): prefill_ms for b in batches for s in seqs},
    })


@pytest.fixture
def tp1():
    return tp1_model()


@pytest.fixture
def gpu():
    return tp1_gpu()


@pytest.fixture
def profile():
    return flat_profile()


@pytest.fixture
def bus():
    return BusSpec(TP1_BW, 2)


# acceptance outcomes, one line per criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
