"""Seeded synthetic telemetry with a known power decomposition.

Node power per second is::

    P(t) = idle + sum_c gain * w_c * s(u_c(t)) + gain * w_bg * s(b(t)) + noise(t)

where ``u_c`` is the usage (CPU seconds per second) of workload container
``c``, ``b`` the background container usage and ``s`` the identity, or a
piecewise-linear saturation when the platform sets ``saturation_usage``.
The background slope ``w_bg`` is fixed by the idling profile:
``gain * w_bg * base_usage = profile_background_watts - idle_watts``.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import SpecError
from .telemetry import NODE, Producer, TelemetryFrame, write

PATTERNS = ("constant", "ramp", "square", "bursty")
INSTRUCTIONS_PER_JOULE = 1e8
POWER_METRIC = "energy_joules"


@dataclass(frozen=True)
class Workload:
    container: str
    pattern: str = "constant"
    peak_usage: float = 2.0
    watts_per_usage: float = 10.0
    period: int = 60
    io_bytes_per_usage: float = 4.0e6
    misses_per_usage: float = 2.0e6


@dataclass(frozen=True)
class Surge:
    start: int
    end: int
    extra_usage: float


@dataclass(frozen=True)
class Background:
    base_usage: float = 0.5
    surges: tuple = ()
    coupling: float = 0.0
    jitter_stddev: float = 0.0
    container: str = "kube-system"
    io_bytes_per_usage: float = 5.0e7
    misses_per_usage: float = 8.0e6


@dataclass(frozen=True)
class Platform:
    governor_gain: float = 1.0
    noise_stddev: float = 0.0
    frequency_ghz: float = 2.4
    saturation_usage: float | None = None


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 42
    duration: int = 600
    idle_watts: float = 40.0
    profile_background_watts: float = 45.0
    platform: Platform = field(default_factory=Platform)
    workloads: tuple = (Workload("workload-0"),)
    background: Background = field(default_factory=Background)
    start: int = 1_700_000_000
    tag: str = ""

    def validate(self) -> None:
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise SpecError("seed must be a 64-bit unsigned integer")
        if self.duration < 10:
            raise SpecError("duration must be at least 10 seconds")
        if not self.profile_background_watts >= self.idle_watts >= 0:
            raise SpecError("need profile_background_watts >= idle_watts >= 0")
        p = self.platform
        if p.governor_gain <= 0 or p.noise_stddev < 0 or p.frequency_ghz <= 0:
            raise SpecError("platform gain and frequency must be positive, noise non-negative")
        if p.saturation_usage is not None and p.saturation_usage <= 0:
            raise SpecError("saturation_usage must be positive")
        if not self.workloads:
            raise SpecError("at least one workload is required")
        bg = self.background
        ids = [w.container for w in self.workloads] + [bg.container]
        if len(set(ids)) != len(ids) or NODE in ids or not all(ids):
            raise SpecError("container ids must be unique, non-empty and not 'node'")
        for w in self.workloads:
            if w.pattern not in PATTERNS:
                raise SpecError(f"unknown pattern {w.pattern!r}")
            if w.peak_usage < 0 or w.watts_per_usage < 0 or w.period < 2:
                raise SpecError(f"bad workload parameters for {w.container}")
        if bg.base_usage < 0 or bg.coupling < 0 or bg.jitter_stddev < 0:
            raise SpecError("background usage parameters must be non-negative")
        if bg.base_usage == 0 and self.profile_background_watts != self.idle_watts:
            raise SpecError("a background without base usage cannot draw idling power")
        for s in bg.surges:
            if not 0 <= s.start < s.end <= self.duration or s.extra_usage < 0:
                raise SpecError(f"bad surge {s}")


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """Per-second truth aligned with the rate-converted frame (length = duration)."""

    workload_watts: np.ndarray
    background_watts: np.ndarray
    noise: np.ndarray
    node_watts: np.ndarray
    workload_usage: np.ndarray
    idle_watts: float
    profile_background_watts: float
    background_ids: tuple
    target_ids: tuple

    @property
    def dynamic_background_watts(self) -> np.ndarray:
        return self.background_watts - (self.profile_background_watts - self.idle_watts)

    def to_dict(self) -> dict:
        return {
            "idle_watts": self.idle_watts,
            "profile_background_watts": self.profile_background_watts,
            "background_ids": list(self.background_ids),
            "target_ids": list(self.target_ids),
            "workload_watts": self.workload_watts.tolist(),
            "background_watts": self.background_watts.tolist(),
            "noise": self.noise.tolist(),
            "node_watts": self.node_watts.tolist(),
            "workload_usage": self.workload_usage.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruth":
        arr = lambda k: np.asarray(d[k], dtype=np.float64)  # noqa: E731
        return cls(
            workload_watts=arr("workload_watts"),
            background_watts=arr("background_watts"),
            noise=arr("noise"),
            node_watts=arr("node_watts"),
            workload_usage=arr("workload_usage"),
            idle_watts=d["idle_watts"],
            profile_background_watts=d["profile_background_watts"],
            background_ids=tuple(d["background_ids"]),
            target_ids=tuple(d["target_ids"]),
        )


def usage_pattern(w: Workload, duration: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(duration)
    if w.pattern == "constant":
        u = np.full(duration, 1.0)
    elif w.pattern == "ramp":
        u = 0.1 + 0.9 * (t % w.period) / (w.period - 1)
    elif w.pattern == "square":
        u = np.where((t // (w.period // 2)) % 2 == 0, 1.0, 0.1)
    else:
        u = np.empty(duration)
        i = 0
        while i < duration:
            length = int(rng.integers(5, 41))
            u[i:i + length] = rng.uniform(0.05, 1.0)
            i += length
    return w.peak_usage * u


def _watts(usage, slope, platform: Platform) -> np.ndarray:
    s = platform.saturation_usage
    if s is not None:
        usage = np.minimum(usage, s) + 0.5 * np.maximum(usage - s, 0.0)
    return platform.governor_gain * slope * usage


def _cumulative(rate, offset) -> np.ndarray:
    return np.concatenate([[offset], offset + np.cumsum(rate)])


def _container_series(cid, usage, watts_per_usage, io, misses, freq_ghz):
    per_second = {
        (Producer.CGROUPS, "cpu_usage_seconds"): usage,
        (Producer.CGROUPS, "io_bytes"): usage * io,
        (Producer.BPF, "cpu_time_ms"): usage * 1000.0,
        (Producer.HWCOUNTER, "cpu_cycles"): usage * freq_ghz * 1e9,
        (Producer.HWCOUNTER, "cpu_instructions"): usage * watts_per_usage * INSTRUCTIONS_PER_JOULE,
        (Producer.HWCOUNTER, "cache_misses"): usage * misses,
    }
    return {(cid, p, m): r for (p, m), r in per_second.items()}


def generate(spec: SynthSpec) -> tuple[TelemetryFrame, GroundTruth]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, plat, bg = spec.duration, spec.platform, spec.background

    usages = [usage_pattern(w, n, rng) for w in spec.workloads]
    total_usage = np.sum(usages, axis=0)
    b = np.full(n, bg.base_usage) + bg.coupling * total_usage
    t = np.arange(n)
    for s in bg.surges:
        b = b + np.where((t >= s.start) & (t < s.end), s.extra_usage, 0.0)
    if bg.jitter_stddev:
        b = np.maximum(b + rng.normal(0.0, bg.jitter_stddev, n), 0.0)

    bg_slope = 0.0
    if bg.base_usage > 0:
        bg_slope = (spec.profile_background_watts - spec.idle_watts) / (plat.governor_gain * bg.base_usage)
    workload_watts = np.sum(
        [_watts(u, w.watts_per_usage, plat) for u, w in zip(usages, spec.workloads)], axis=0
    )
    background_watts = _watts(b, bg_slope, plat)
    noise = rng.normal(0.0, plat.noise_stddev, n) if plat.noise_stddev else np.zeros(n)
    node_watts = spec.idle_watts + workload_watts + background_watts + noise
    if np.any(node_watts < 0):
        raise SpecError("noise drives node power negative; lower noise_stddev")

    rates = {}
    for u, w in zip(usages, spec.workloads):
        rates.update(_container_series(w.container, u, w.watts_per_usage, w.io_bytes_per_usage,
                                       w.misses_per_usage, plat.frequency_ghz))
    rates.update(_container_series(bg.container, b, bg_slope, bg.io_bytes_per_usage,
                                   bg.misses_per_usage, plat.frequency_ghz))
    rates[(NODE, Producer.POWER, POWER_METRIC)] = node_watts

    series = {}
    for key in sorted(rates):
        offset = float(rng.integers(0, 10_000))
        series[key] = _cumulative(rates[key], offset)
    frame = TelemetryFrame(
        start=spec.start, series=series, background_ids=frozenset([bg.container])
    )
    truth = GroundTruth(
        workload_watts=workload_watts,
        background_watts=background_watts,
        noise=noise,
        node_watts=node_watts,
        workload_usage=total_usage,
        idle_watts=spec.idle_watts,
        profile_background_watts=spec.profile_background_watts,
        background_ids=(bg.container,),
        target_ids=tuple(w.container for w in spec.workloads),
    )
    return frame, truth


# -- 3 platforms x 3 workload patterns

PLATFORMS = {
    "p1": dict(idle_watts=40.6, profile_background_watts=42.4,
               platform=Platform(governor_gain=1.0, frequency_ghz=3.6)),
    "p2": dict(idle_watts=12.8, profile_background_watts=26.5,
               platform=Platform(governor_gain=0.6, frequency_ghz=1.8)),
    "p3": dict(idle_watts=50.0, profile_background_watts=54.5,
               platform=Platform(governor_gain=1.3, frequency_ghz=2.4)),
}

WORKLOADS = {
    "w1": Workload("bench", pattern="square", peak_usage=4.0, watts_per_usage=12.0, period=60,
                   io_bytes_per_usage=2.0e6, misses_per_usage=1.0e6),
    "w2": Workload("bench", pattern="bursty", peak_usage=3.0, watts_per_usage=9.0,
                   io_bytes_per_usage=8.0e6, misses_per_usage=6.0e6),
    "w3": Workload("bench", pattern="ramp", peak_usage=6.0, watts_per_usage=7.0, period=90,
                   io_bytes_per_usage=1.5e7, misses_per_usage=3.0e6),
}


def _noiseless_range(spec: SynthSpec) -> float:
    quiet = dataclasses.replace(spec, platform=dataclasses.replace(spec.platform, noise_stddev=0.0))
    _, truth = generate(quiet)
    return float(np.ptp(truth.node_watts))


def grid_specs(seed: int = 42, duration: int = 900, noise_fraction: float = 0.02,
               surge_usage: float = 1.5, coupling: float = 0.25) -> list[SynthSpec]:
    """The 9 dataset specs; noise stddev is ``noise_fraction`` of each noiseless power range."""
    specs = []
    third = duration // 3
    for i, (ptag, pkw) in enumerate(PLATFORMS.items()):
        for j, (wtag, workload) in enumerate(WORKLOADS.items()):
            ds_seed = int(np.random.SeedSequence([seed, i, j]).generate_state(1, dtype=np.uint64)[0])
            spec = SynthSpec(
                seed=ds_seed,
                duration=duration,
                workloads=(workload,),
                background=Background(
                    base_usage=0.5,
                    coupling=coupling,
                    surges=(Surge(third, 2 * third, surge_usage),),
                ),
                tag=f"{ptag}-{wtag}",
                **pkw,
            )
            sigma = noise_fraction * _noiseless_range(spec)
            specs.append(dataclasses.replace(
                spec, platform=dataclasses.replace(spec.platform, noise_stddev=sigma)
            ))
    return specs


def spec_to_dict(spec: SynthSpec) -> dict:
    return dataclasses.asdict(spec)


def write_dataset(frame: TelemetryFrame, truth: GroundTruth, directory, spec: SynthSpec | None = None,
                  ) -> None:
    os.makedirs(directory, exist_ok=True)
    write(frame, os.path.join(directory, "telemetry.csv"))
    doc = truth.to_dict()
    if spec is not None:
        doc["tag"] = spec.tag
        doc["spec"] = spec_to_dict(spec)
    tmp = os.path.join(directory, "ground_truth.json.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, os.path.join(directory, "ground_truth.json"))


def read_ground_truth(directory) -> GroundTruth | None:
    path = os.path.join(directory, "ground_truth.json")
    if not os.path.exists(path):
        return None
    with open(path, encoding="utf-8") as fh:
        return GroundTruth.from_dict(json.load(fh))


def grid(out, seed: int = 42, **kwargs) -> list[tuple[str, TelemetryFrame, GroundTruth]]:
    """Generate the 9-dataset suite under ``out/<tag>/``."""
    suite = []
    for spec in grid_specs(seed, **kwargs):
        frame, truth = generate(spec)
        if out is not None:
            write_dataset(frame, truth, os.path.join(out, spec.tag), spec)
        suite.append((spec.tag, frame, truth))
    return suite
