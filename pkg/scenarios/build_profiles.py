"""Regenerate the bundled profile documents (deterministic)."""

from pathlib import Path

from slo_offload.profiles import DECODE, GpuSpec, LatencyProfile, ModelSpec, synth_profile, write_profile_file

HERE = Path(__file__).parent / "profiles"


def tp1():
    # peak estimate 1.0 ms per decode layer at batch 8; measured times are twice that
    model = ModelSpec(8, 120_000_000, 65_536, {"prefill": 1e9, "decode": 1e9}, 2048, name="tp1")
    gpu = GpuSpec(24_000_000_000, 8e12, 1_000_000_000, name="desk-gpu")
    profile = synth_profile(model, gpu, 0.5, [1, 2, 4, 8, 16, 32, 64], [32, 64, 128, 256])
    return model, gpu, profile


def transfer_bound():
    # 1.312 ms compute per layer; 453.2 MB per layer moves in 18.128 ms at 25 GB/s
    model = ModelSpec(32, 453_200_000, 65_536, {"prefill": 1e9, "decode": 1e9}, 2048, name="transfer_bound")
    gpu = GpuSpec(24_000_000_000, 8e12, 1_000_000_000, name="desk-gpu")
    table = {(b, s): 1.312 for b in (1, 2, 4, 8) for s in (64, 128)}
    return model, gpu, LatencyProfile({DECODE: table})


if __name__ == "__main__":
    HERE.mkdir(exist_ok=True)
    for name, build in (("tp1", tp1), ("transfer_bound", transfer_bound)):
        write_profile_file(HERE / f"{name}.json", *build())
