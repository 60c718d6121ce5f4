import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from isowatt import synthgen  # noqa: E402
from isowatt.telemetry import NODE, Producer, TelemetryFrame  # noqa: E402


def make_frame(usage: dict, power, background=(), producer=Producer.CGROUPS, metric="cpu_time",
               is_rate=True, start=0):
    """Frame from per-container usage vectors (one metric) and a power vector."""
    series = {(cid, producer, metric): values for cid, values in usage.items()}
    series[(NODE, Producer.POWER, "energy_joules")] = power
    return TelemetryFrame(start=start, series=series, background_ids=frozenset(background), is_rate=is_rate)


@pytest.fixture
def store(tmp_path):
    return str(tmp_path / "models")


@pytest.fixture(scope="session")
def grid42():
    return synthgen.grid(None, seed=42)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "VERDICTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
