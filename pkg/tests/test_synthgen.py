import dataclasses
import hashlib
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from isowatt import synthgen
from isowatt.errors import SpecError
from isowatt.extractor import to_rates
from isowatt.isolator import Method
from isowatt.pipeline import isolate
from isowatt.synthgen import Background, Platform, Surge, SynthSpec, Workload, generate
from isowatt.telemetry import NODE, Producer, ingest


def test_constant_workload_identity():
    spec = SynthSpec(duration=30, idle_watts=40, profile_background_watts=45,
                     workloads=(Workload("w", "constant", 2.0, 10.0),), background=Background(base_usage=0.5))
    frame, truth = generate(spec)
    watts = to_rates(frame).power()
    bg_slope = (45 - 40) / 0.5
    np.testing.assert_allclose(watts, 40 + 0.5 * bg_slope + 2.0 * 10.0, atol=1e-9)
    np.testing.assert_array_equal(truth.noise, 0)


def test_square_wave_correlation_is_one():
    spec = SynthSpec(duration=240, workloads=(Workload("w", "square", 3.0, 8.0),))
    frame, truth = generate(spec)
    isolated = to_rates(frame).power() - truth.background_watts
    assert oracles.pearson(truth.workload_usage.tolist(), isolated.tolist()) == pytest.approx(1.0, abs=1e-12)


def test_doubled_gain_dominates():
    base = SynthSpec(duration=60, workloads=(Workload("w", "ramp", 3.0, 8.0),))
    doubled = dataclasses.replace(base, platform=Platform(governor_gain=2.0))
    _, t1 = generate(base)
    _, t2 = generate(doubled)
    np.testing.assert_array_equal(t1.workload_usage, t2.workload_usage)
    assert np.all(t2.node_watts - t2.background_watts > t1.node_watts - t1.background_watts)


def test_decomposition_identity(grid42):
    for _, _, truth in grid42:
        residual = truth.node_watts - truth.workload_watts - truth.background_watts - truth.idle_watts
        np.testing.assert_allclose(residual, truth.noise, rtol=0, atol=1e-9)


def test_rate_recovery(grid42):
    _, frame, truth = grid42[4]
    rates = to_rates(frame)
    cpu = rates.series[("bench", Producer.CGROUPS, "cpu_usage_seconds")]
    np.testing.assert_allclose(cpu, truth.workload_usage, atol=1e-9)
    np.testing.assert_allclose(rates.power(), truth.node_watts, atol=1e-9)
    cycles = rates.series[("bench", Producer.HWCOUNTER, "cpu_cycles")]
    np.testing.assert_allclose(cycles, truth.workload_usage * 1.8e9, rtol=1e-9)


def test_grid_tags_and_reproducibility(tmp_path):
    a = synthgen.grid(str(tmp_path / "a"), seed=42, duration=60)
    synthgen.grid(str(tmp_path / "b"), seed=42, duration=60)
    tags = [t for t, _, _ in a]
    assert len(tags) == 9 and "p1-w2" in tags
    for tag in tags:
        for name in ("telemetry.csv", "ground_truth.json"):
            fa = (tmp_path / "a" / tag / name).read_bytes()
            fb = (tmp_path / "b" / tag / name).read_bytes()
            assert hashlib.sha256(fa).digest() == hashlib.sha256(fb).digest()
    frame = ingest(tmp_path / "a" / "p2-w3" / "telemetry.csv")
    truth = synthgen.read_ground_truth(str(tmp_path / "a" / "p2-w3"))
    assert frame.n == 61 and truth.node_watts.shape == (60,)
    assert synthgen.read_ground_truth(str(tmp_path)) is None


def test_grid_noise_is_two_percent_of_range():
    for spec in synthgen.grid_specs(duration=120):
        quiet = dataclasses.replace(spec, platform=dataclasses.replace(spec.platform, noise_stddev=0.0))
        _, truth = generate(quiet)
        assert spec.platform.noise_stddev == pytest.approx(0.02 * np.ptp(truth.node_watts))


def test_frame_layout():
    frame, truth = generate(SynthSpec(duration=20))
    assert frame.n == 21
    assert frame.background_ids == {"kube-system"}
    assert (NODE, Producer.POWER, "energy_joules") in frame.series
    assert truth.target_ids == ("workload-0",)


@pytest.mark.parametrize("change", [
    dict(duration=5),
    dict(idle_watts=50, profile_background_watts=45),
    dict(workloads=()),
    dict(workloads=(Workload("w", "zigzag"),)),
    dict(workloads=(Workload("kube-system"),)),
    dict(background=Background(surges=(Surge(10, 5, 1.0),))),
    dict(platform=Platform(governor_gain=0)),
    dict(seed=-1),
])
def test_invalid_specs(change):
    with pytest.raises(SpecError):
        generate(dataclasses.replace(SynthSpec(duration=30), **change))


def test_bursty_surge_proposed_beats_heuristic():
    spec = SynthSpec(
        seed=42, duration=1000, idle_watts=40, profile_background_watts=45,
        platform=Platform(noise_stddev=1.0),
        workloads=(Workload("bench", "bursty", 4.0, 12.0),),
        background=Background(base_usage=0.5, surges=(Surge(200, 800, 3.0),)),
    )
    frame, truth = generate(spec)
    _, _, prop, _ = isolate(frame, Producer.HWCOUNTER, Method.PROPOSED)
    _, _, heur, _ = isolate(frame, Producer.HWCOUNTER, Method.HEURISTIC_MIN)
    c_prop = oracles.pearson(prop.labels.tolist(), truth.workload_watts.tolist())
    c_heur = oracles.pearson(heur.labels.tolist(), truth.workload_watts.tolist())
    assert c_prop >= 0.9
    assert c_heur < c_prop


def test_saturation_mode_is_nonlinear():
    spec = SynthSpec(duration=90, platform=Platform(saturation_usage=1.0),
                     workloads=(Workload("w", "ramp", 3.0, 10.0, period=90),))
    _, truth = generate(spec)
    u, w = truth.workload_usage, truth.workload_watts
    assert np.allclose(w[u <= 1.0], 10 * u[u <= 1.0])
    assert np.all(w[u > 1.0] < 10 * u[u > 1.0])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from(synthgen.PATTERNS), st.floats(0.1, 8), st.floats(0, 3))
def test_rates_recover_usage(seed, pattern, peak, noise):
    spec = SynthSpec(seed=seed, duration=40, platform=Platform(noise_stddev=noise),
                     workloads=(Workload("w", pattern, peak, 5.0),))
    try:
        frame, truth = generate(spec)
    except SpecError:
        return
    rates = to_rates(frame)
    np.testing.assert_allclose(rates.series[("w", Producer.BPF, "cpu_time_ms")],
                               truth.workload_usage * 1000, rtol=1e-9, atol=1e-9)
    residual = truth.node_watts - truth.workload_watts - truth.background_watts - truth.idle_watts
    np.testing.assert_allclose(residual, truth.noise, atol=1e-9)


def test_write_dataset_round_trip(tmp_path):
    spec = SynthSpec(duration=25, tag="t")
    frame, truth = generate(spec)
    synthgen.write_dataset(frame, truth, str(tmp_path / "t"), spec)
    back = synthgen.read_ground_truth(str(tmp_path / "t"))
    assert np.array_equal(back.node_watts, truth.node_watts)
    assert back.background_ids == truth.background_ids
    assert os.path.exists(tmp_path / "t" / "telemetry.csv")
