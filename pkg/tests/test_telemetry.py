import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isowatt import telemetry
from isowatt.errors import AlignmentError, MissingPowerError, ParseError, UnknownContainerError
from isowatt.telemetry import MetricSample, Producer, ingest, mark_background, write

from conftest import make_frame


def _csv(path, rows):
    lines = ["timestamp,entity,producer,metric,value"]
    lines += [",".join(str(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return str(path)


def test_minimal_file(tmp_path):
    rows = [(t, "c1", "cgroups", "cpu_time", 10 * t) for t in range(3)]
    rows += [(t, "node", "power", "energy_joules", 50 * t) for t in range(3)]
    frame = ingest(_csv(tmp_path / "t.csv", rows))
    assert frame.n == 3
    assert frame.containers == {"c1"}
    assert frame.start == 0
    np.testing.assert_array_equal(frame.power(), [0, 50, 100])


def test_window_intersection(tmp_path):
    rows = [(t, "c1", "cgroups", "cpu_time", t) for t in range(10)]
    rows += [(t, "node", "power", "energy_joules", t) for t in range(2, 10)]
    frame = ingest(_csv(tmp_path / "t.csv", rows))
    assert frame.n == 8
    assert frame.start == 2
    np.testing.assert_array_equal(frame.timestamps, np.arange(2, 10))


def test_missing_power(tmp_path):
    rows = [(t, "c1", "cgroups", "cpu_time", t) for t in range(3)]
    with pytest.raises(MissingPowerError):
        ingest(_csv(tmp_path / "t.csv", rows))


def test_gap_keeps_longest_covered_run(tmp_path):
    times = [0, 1, 2, 4, 5, 6, 7]
    rows = [(t, "c1", "cgroups", "cpu_time", t) for t in times]
    rows += [(t, "node", "power", "energy_joules", t) for t in range(8)]
    frame = ingest(_csv(tmp_path / "t.csv", rows))
    assert frame.start == 4 and frame.n == 4


def test_no_window(tmp_path):
    rows = [(0, "c1", "cgroups", "cpu_time", 1), (2, "c1", "cgroups", "cpu_time", 2)]
    rows += [(t, "node", "power", "energy_joules", t) for t in range(3)]
    with pytest.raises(AlignmentError):
        ingest(_csv(tmp_path / "t.csv", rows))


def test_last_observation_wins(tmp_path):
    rows = [(0, "c1", "cgroups", "cpu_time", 1), (0, "c1", "cgroups", "cpu_time", 7),
            (1, "c1", "cgroups", "cpu_time", 9)]
    rows += [(t, "node", "power", "energy_joules", t) for t in range(2)]
    frame = ingest(_csv(tmp_path / "t.csv", rows))
    np.testing.assert_array_equal(frame.series[("c1", Producer.CGROUPS, "cpu_time")], [7, 9])


@pytest.mark.parametrize("row, fragment", [
    ((0, "c1", "cgroups", "cpu_time", -1), "non-negative"),
    ((0, "c1", "gpu", "cpu_time", 1), "unknown producer"),
    ((0, "c1", "power", "energy", 1), "power samples"),
    (("x", "c1", "cgroups", "cpu_time", 1), "timestamp"),
    ((0.5, "c1", "cgroups", "cpu_time", 1), "integer"),
    ((0, "", "cgroups", "cpu_time", 1), "missing"),
])
def test_parse_error_carries_line(tmp_path, row, fragment):
    rows = [(0, "node", "power", "energy_joules", 1), row]
    with pytest.raises(ParseError, match=fragment) as info:
        ingest(_csv(tmp_path / "t.csv", rows))
    assert info.value.line == 3


def test_bad_header(tmp_path):
    p = tmp_path / "t.csv"
    p.write_text("ts,entity,producer,metric,value\n")
    with pytest.raises(ParseError):
        ingest(str(p))


def test_jsonl(tmp_path):
    p = tmp_path / "t.jsonl"
    lines = []
    for t in range(3):
        lines.append(json.dumps({"timestamp": t, "entity": "c1", "producer": "bpf", "metric": "m", "value": t}))
        lines.append(json.dumps({"timestamp": t, "entity": "node", "producer": "power",
                                 "metric": "energy_joules", "value": 2 * t}))
    p.write_text("\n".join(lines) + "\n\n")
    frame = ingest(str(p), "jsonl")
    assert frame.n == 3 and frame.producers == {Producer.BPF}


def test_jsonl_bad_line(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text('{"timestamp": 0}\nnot json\n')
    with pytest.raises(ParseError) as info:
        ingest(str(p), "jsonl")
    assert info.value.line == 1


def test_sample_invariants():
    with pytest.raises(ValueError):
        MetricSample(0, "c1", Producer.POWER, "e", 1.0)
    with pytest.raises(ValueError):
        MetricSample(0, "c1", Producer.CGROUPS, "e", -0.1)


def test_mark_background():
    frame = make_frame({"c1": [1, 2], "c2": [3, 4]}, [5, 6])
    assert mark_background(frame, ["c2"]).background_ids == {"c2"}
    solo = make_frame({"c1": [1, 2]}, [5, 6])
    assert mark_background(solo, []).background_ids == frozenset()
    with pytest.raises(UnknownContainerError):
        mark_background(solo, ["c9"])


def test_frame_immutable():
    frame = make_frame({"c1": [1, 2]}, [5, 6])
    with pytest.raises(ValueError):
        frame.power()[0] = 3.0


@pytest.mark.parametrize("fmt", ["csv", "jsonl"])
def test_round_trip_exact(tmp_path, fmt):
    rng = np.random.default_rng(3)
    frame = make_frame(
        {"c1": np.cumsum(rng.uniform(0, 5, 20)), "c2": np.cumsum(rng.uniform(0, 1e9, 20))},
        np.cumsum(rng.uniform(20, 200, 20)), is_rate=False, start=1_700_000_000,
    )
    write(frame, tmp_path / f"a.{fmt}", fmt)
    back = ingest(tmp_path / f"a.{fmt}", fmt)
    assert back.start == frame.start
    for key, values in frame.series.items():
        assert back.series[key].tobytes() == values.tobytes()


def test_round_trip_nine_digits_is_a_fixed_point(tmp_path):
    rng = np.random.default_rng(4)
    frame = make_frame({"c1": np.cumsum(rng.uniform(0, 5, 10))}, np.cumsum(rng.uniform(0, 99, 10)),
                       is_rate=False)
    write(frame, tmp_path / "a.csv", digits=9)
    once = ingest(tmp_path / "a.csv")
    write(once, tmp_path / "b.csv", digits=9)
    twice = ingest(tmp_path / "b.csv")
    for key in once.series:
        assert once.series[key].tobytes() == twice.series[key].tobytes()
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sets(st.integers(0, 29), min_size=3), min_size=1, max_size=4),
       st.sets(st.integers(0, 29), min_size=3))
def test_gapped_inputs_align_to_equal_lengths(coverages, power_cov):
    samples = []
    for c, cov in enumerate(coverages):
        samples += [MetricSample(t, f"c{c}", Producer.CGROUPS, "cpu", float(t)) for t in cov]
    samples += [MetricSample(t, "node", Producer.POWER, "e", float(t)) for t in power_cov]
    try:
        frame = telemetry.align(samples)
    except AlignmentError:
        common = set(power_cov).intersection(*coverages)
        assert not any(t + 1 in common for t in common)
        return
    lengths = {len(v) for v in frame.series.values()}
    assert lengths == {frame.n} and frame.n >= 2
    window = set(range(frame.start, frame.start + frame.n))
    for cov in list(coverages) + [power_cov]:
        assert window <= set(cov)
