"""Power and usage time series: data model, file ingestion, background marking."""

from __future__ import annotations

import csv
import dataclasses
import enum
import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import (
    AlignmentError,
    DataError,
    MissingPowerError,
    ParseError,
    UnknownContainerError,
)

NODE = "node"
FIELDS = ("timestamp", "entity", "producer", "metric", "value")


class Producer(str, enum.Enum):
    HWCOUNTER = "hwcounter"
    CGROUPS = "cgroups"
    BPF = "bpf"
    CADVISOR = "cadvisor"
    POWER = "power"

    def __str__(self) -> str:
        return self.value


USAGE_PRODUCERS = tuple(p for p in Producer if p is not Producer.POWER)

SeriesKey = tuple  # (entity, producer, metric)


class AmbiguousPowerError(DataError):
    pass


@dataclass(frozen=True)
class MetricSample:
    timestamp: int
    entity: str
    producer: Producer
    metric: str
    value: float

    def __post_init__(self):
        if not self.value >= 0 or not math.isfinite(self.value):
            raise ValueError(f"value must be finite and non-negative, got {self.value!r}")
        if self.producer is Producer.POWER and self.entity != NODE:
            raise ValueError(f"power samples belong to entity {NODE!r}, got {self.entity!r}")
        if not self.entity or not self.metric:
            raise ValueError("entity and metric must be non-empty")

    @classmethod
    def from_fields(cls, raw: Mapping) -> "MetricSample":
        missing = [f for f in FIELDS if f not in raw or raw[f] in (None, "")]
        if missing:
            raise ValueError(f"missing field(s): {', '.join(missing)}")
        ts = raw["timestamp"]
        if isinstance(ts, str):
            ts = ts.strip()
            try:
                ts = int(ts) if ts.lstrip("-").isdigit() else float(ts)
            except ValueError:
                raise ValueError(f"bad timestamp {raw['timestamp']!r}") from None
        if isinstance(ts, bool) or not isinstance(ts, (int, float)):
            raise ValueError(f"bad timestamp {raw['timestamp']!r}")
        if isinstance(ts, float):
            if not ts.is_integer():
                raise ValueError(f"timestamp must be integer seconds, got {ts!r}")
            ts = int(ts)
        try:
            producer = Producer(str(raw["producer"]).strip())
        except ValueError:
            raise ValueError(f"unknown producer {raw['producer']!r}") from None
        value = raw["value"]
        if isinstance(value, bool):
            raise ValueError(f"bad value {value!r}")
        try:
            value = float(value)
        except (TypeError, ValueError):
            raise ValueError(f"bad value {raw['value']!r}") from None
        return cls(
            timestamp=ts,
            entity=str(raw["entity"]).strip(),
            producer=producer,
            metric=str(raw["metric"]).strip(),
            value=value,
        )


@dataclass(frozen=True, eq=False)
class TelemetryFrame:
    """Aligned time series of node power and per-container usage.

    ``series`` maps ``(entity, producer, metric)`` to equal-length vectors.
    Raw frames hold cumulative counters (joules for power); after
    :func:`isowatt.extractor.to_rates` they hold per-second rates and watts.
    """

    start: int
    series: Mapping[tuple, np.ndarray]
    interval: int = 1
    background_ids: frozenset = frozenset()
    is_rate: bool = False
    reset_counts: Mapping[tuple, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.interval <= 0:
            raise ValueError("interval must be positive")
        if not self.series:
            raise ValueError("frame has no series")
        frozen = {}
        lengths = set()
        for key, values in self.series.items():
            entity, producer, metric = key
            key = (entity, Producer(producer), metric)
            arr = np.array(values, dtype=np.float64)
            if arr.ndim != 1:
                raise ValueError(f"series {key} is not one-dimensional")
            arr.setflags(write=False)
            frozen[key] = arr
            lengths.add(arr.shape[0])
        if len(lengths) != 1:
            raise AlignmentError(f"series lengths differ: {sorted(lengths)}")
        min_len = 1 if self.is_rate else 2
        if lengths.pop() < min_len:
            raise AlignmentError(f"frames need at least {min_len} time points")
        object.__setattr__(self, "series", dict(sorted(frozen.items())))
        object.__setattr__(self, "background_ids", frozenset(self.background_ids))
        object.__setattr__(self, "reset_counts", dict(self.reset_counts))
        unknown = self.background_ids - self.containers
        if unknown:
            raise UnknownContainerError(f"unknown background container(s): {sorted(unknown)}")

    @property
    def n(self) -> int:
        return next(iter(self.series.values())).shape[0]

    @property
    def containers(self) -> frozenset:
        return frozenset(e for e, _, _ in self.series if e != NODE)

    @property
    def target_ids(self) -> frozenset:
        return self.containers - self.background_ids

    @property
    def producers(self) -> frozenset:
        return frozenset(p for _, p, _ in self.series if p is not Producer.POWER)

    @property
    def timestamps(self) -> np.ndarray:
        return self.start + self.interval * np.arange(self.n, dtype=np.int64)

    def power_key(self, metric: str | None = None) -> tuple:
        keys = [k for k in self.series if k[0] == NODE and k[1] is Producer.POWER]
        if metric is not None:
            keys = [k for k in keys if k[2] == metric]
        if not keys:
            raise MissingPowerError("frame has no node power series")
        if len(keys) > 1:
            raise AmbiguousPowerError(
                f"several node power metrics {[k[2] for k in keys]}; pick one explicitly"
            )
        return keys[0]

    def power(self, metric: str | None = None) -> np.ndarray:
        return self.series[self.power_key(metric)]

    def metrics(self, producer) -> list[str]:
        producer = Producer(producer)
        return sorted({m for e, p, m in self.series if p is producer and e != NODE})


def _read_csv(path) -> Iterator[tuple[int, dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if [h.strip() for h in header] != list(FIELDS):
            raise ParseError(f"expected header {','.join(FIELDS)}, got {','.join(header)}", line=1)
        for row in reader:
            if None in row:
                raise ParseError("too many columns", line=reader.line_num)
            yield reader.line_num, row


def _read_jsonl(path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from None
            if not isinstance(obj, dict):
                raise ParseError("expected a JSON object", line=lineno)
            yield lineno, obj


def read_samples(path, format: str = "csv") -> list[MetricSample]:
    if not os.path.exists(path):
        raise ParseError(f"no such file: {path}")
    readers = {"csv": _read_csv, "jsonl": _read_jsonl}
    if format not in readers:
        raise ValueError(f"unknown format {format!r}")
    samples = []
    for lineno, raw in readers[format](path):
        try:
            samples.append(MetricSample.from_fields(raw))
        except (ValueError, TypeError) as exc:
            raise ParseError(str(exc), line=lineno) from None
    return samples


def _longest_run(buckets: list[int]) -> tuple[int, int]:
    best_start, best_len = buckets[0], 1
    run_start, run_len = buckets[0], 1
    for prev, cur in zip(buckets, buckets[1:]):
        if cur == prev + 1:
            run_len += 1
        else:
            run_start, run_len = cur, 1
        if run_len > best_len:
            best_start, best_len = run_start, run_len
    return best_start, best_len


def align(samples: Iterable[MetricSample], interval: int = 1) -> TelemetryFrame:
    """Snap samples onto the ``interval`` grid and trim to the longest fully covered window.

    Within one grid cell the last observation wins; nothing is interpolated.
    """
    by_key: dict[tuple, dict[int, float]] = {}
    for s in sorted(samples, key=lambda s: s.timestamp):
        by_key.setdefault((s.entity, s.producer, s.metric), {})[s.timestamp // interval] = s.value
    if not any(k[1] is Producer.POWER for k in by_key):
        raise MissingPowerError("no producer=power rows")
    common = None
    for cells in by_key.values():
        common = set(cells) if common is None else common & cells.keys()
    if not common:
        raise AlignmentError("series share no time point")
    start, length = _longest_run(sorted(common))
    if length < 2:
        raise AlignmentError("no fully covered window of length >= 2")
    series = {
        key: np.array([cells[b] for b in range(start, start + length)], dtype=np.float64)
        for key, cells in by_key.items()
    }
    return TelemetryFrame(start=start * interval, series=series, interval=interval)


def ingest(path, format: str = "csv", interval: int = 1) -> TelemetryFrame:
    return align(read_samples(path, format), interval=interval)


def iter_rows(frame: TelemetryFrame, digits: int | None = None) -> Iterator[tuple]:
    fmt = repr if digits is None else (lambda v: f"{v:.{digits}g}")
    ts = frame.timestamps
    for i in range(frame.n):
        for (entity, producer, metric), values in frame.series.items():
            yield int(ts[i]), entity, producer.value, metric, fmt(float(values[i]))


def write(frame: TelemetryFrame, path, format: str = "csv", digits: int | None = None) -> None:
    """Write ``frame`` in the ingest format.

    ``digits=None`` uses the shortest repr that round-trips exactly.
    """
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        if format == "csv":
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(FIELDS)
            writer.writerows(iter_rows(frame, digits))
        elif format == "jsonl":
            for ts, entity, producer, metric, value in iter_rows(frame, digits):
                fh.write(
                    f'{{"timestamp": {ts}, "entity": {json.dumps(entity)}, '
                    f'"producer": "{producer}", "metric": {json.dumps(metric)}, "value": {value}}}\n'
                )
        else:
            raise ValueError(f"unknown format {format!r}")
    os.replace(tmp, path)


def mark_background(frame: TelemetryFrame, ids) -> TelemetryFrame:
    ids = frozenset(ids)
    unknown = ids - frame.containers
    if unknown:
        raise UnknownContainerError(f"unknown container(s): {sorted(unknown)}")
    return dataclasses.replace(frame, background_ids=ids)
