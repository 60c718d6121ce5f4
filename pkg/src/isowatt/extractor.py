"""Raw cumulative telemetry to per-producer feature matrices."""

from __future__ import annotations

import csv
import dataclasses
import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateMatrixError,
    EmptyTargetSetError,
    FeatureMismatchError,
    LengthMismatchError,
    ProducerAbsentError,
    UnknownContainerError,
)
from .telemetry import Producer, TelemetryFrame


class Origin(str, enum.Enum):
    AGGREGATE_ALL = "aggregate_all"
    AGGREGATE_TARGETS = "aggregate_targets"
    BACKGROUND_COMPLEMENT = "background_complement"
    PER_CONTAINER = "per_container"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class CleaningSummary:
    kept_rows: tuple = ()
    dropped_rows: tuple = ()
    dropped_columns: tuple = ()


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    producer: Producer
    feature_names: tuple
    rows: np.ndarray
    labels: np.ndarray | None = None
    origin: Origin = Origin.AGGREGATE_ALL
    container: str | None = None
    cleaning: CleaningSummary | None = None

    def __post_init__(self):
        rows = np.array(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ValueError("rows must be a 2-D matrix")
        if rows.shape[1] != len(self.feature_names):
            raise FeatureMismatchError(
                f"{rows.shape[1]} columns for {len(self.feature_names)} feature names"
            )
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "producer", Producer(self.producer))
        object.__setattr__(self, "origin", Origin(self.origin))
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.float64)
            if labels.shape != (rows.shape[0],):
                raise LengthMismatchError(
                    f"{labels.shape[0]} labels for {rows.shape[0]} rows"
                )
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    def with_labels(self, labels) -> "FeatureMatrix":
        return dataclasses.replace(self, labels=labels)

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.feature_names.index(name)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            header = list(self.feature_names)
            if self.labels is not None:
                header.append("label_watts")
            writer.writerow(header)
            for i in range(self.n):
                row = [repr(float(v)) for v in self.rows[i]]
                if self.labels is not None:
                    row.append(repr(float(self.labels[i])))
                writer.writerow(row)


def rates(values, interval: int = 1) -> tuple[np.ndarray, int]:
    """Successive differences per second; negative steps (counter resets) become 0."""
    diff = np.diff(np.asarray(values, dtype=np.float64)) / interval
    resets = int(np.count_nonzero(diff < 0))
    return np.where(diff < 0, 0.0, diff), resets


def to_rates(frame: TelemetryFrame) -> TelemetryFrame:
    if frame.is_rate:
        return frame
    series, resets = {}, {}
    for key, values in frame.series.items():
        series[key], count = rates(values, frame.interval)
        if count:
            resets[key] = count
    return TelemetryFrame(
        start=frame.start + frame.interval,
        series=series,
        interval=frame.interval,
        background_ids=frame.background_ids,
        is_rate=True,
        reset_counts=resets,
    )


def _sum_containers(frame, producer, names, containers) -> np.ndarray:
    out = np.zeros((frame.n, len(names)))
    for entity in sorted(containers):
        for j, metric in enumerate(names):
            values = frame.series.get((entity, producer, metric))
            if values is not None:
                out[:, j] += values
    return out


def extract(frame: TelemetryFrame, producer, origin=Origin.AGGREGATE_ALL,
            container: str | None = None, power_metric: str | None = None) -> FeatureMatrix:
    """Feature matrix for one producer group, labelled with node watts.

    The aggregate over all containers is formed as targets + background so that
    ``aggregate_all == aggregate_targets + background_complement`` holds bit for bit.
    """
    frame = to_rates(frame)
    producer, origin = Producer(producer), Origin(origin)
    names = tuple(frame.metrics(producer))
    if producer is Producer.POWER or not names:
        raise ProducerAbsentError(f"no {producer} usage series in frame")
    labels = frame.power(power_metric)

    if origin is Origin.PER_CONTAINER:
        if container not in frame.containers:
            raise UnknownContainerError(f"unknown container {container!r}")
        rows = _sum_containers(frame, producer, names, [container])
    else:
        targets = frame.target_ids
        if origin in (Origin.AGGREGATE_TARGETS,) and not targets:
            raise EmptyTargetSetError("every container is marked as background")
        x = _sum_containers(frame, producer, names, targets)
        bg = _sum_containers(frame, producer, names, frame.background_ids)
        rows = {
            Origin.AGGREGATE_ALL: lambda: x + bg,
            Origin.AGGREGATE_TARGETS: lambda: x,
            Origin.BACKGROUND_COMPLEMENT: lambda: bg,
        }[origin]()
    return FeatureMatrix(producer, names, rows, labels, origin, container)


def clean(m: FeatureMatrix) -> FeatureMatrix:
    """Drop rows holding NaN (or negative) entries and all-zero feature columns."""
    bad = np.isnan(m.rows).any(axis=1) | (m.rows < 0).any(axis=1)
    if m.labels is not None:
        bad |= np.isnan(m.labels)
    kept = np.flatnonzero(~bad)
    rows = m.rows[kept]
    zero_cols = [j for j in range(rows.shape[1]) if not np.any(rows[:, j])]
    keep_cols = [j for j in range(rows.shape[1]) if j not in zero_cols]
    if rows.shape[0] < 2 or not keep_cols:
        raise DegenerateMatrixError(
            f"{rows.shape[0]} rows and {len(keep_cols)} columns left after cleaning"
        )
    summary = CleaningSummary(
        kept_rows=tuple(int(i) for i in kept),
        dropped_rows=tuple(int(i) for i in np.flatnonzero(bad)),
        dropped_columns=tuple(m.feature_names[j] for j in zero_cols),
    )
    return dataclasses.replace(
        m,
        rows=rows[:, keep_cols],
        feature_names=tuple(m.feature_names[j] for j in keep_cols),
        labels=None if m.labels is None else m.labels[kept],
        cleaning=summary,
    )


def restrict(m: FeatureMatrix, like: FeatureMatrix) -> FeatureMatrix:
    """Apply the row and column selection of an already cleaned matrix to ``m``."""
    rows = m.rows
    labels = m.labels
    if like.cleaning is not None:
        kept = list(like.cleaning.kept_rows)
        rows = rows[kept]
        labels = None if labels is None else labels[kept]
    m = dataclasses.replace(m, rows=rows, labels=labels, cleaning=like.cleaning)
    return select_features(m, like.feature_names)


def select_features(m: FeatureMatrix, names, fill_missing: bool = False) -> FeatureMatrix:
    """Reorder columns to ``names``; absent names are an error unless ``fill_missing``."""
    names = tuple(names)
    missing = [f for f in names if f not in m.feature_names]
    if missing and not fill_missing:
        raise FeatureMismatchError(f"features {missing} not present in matrix")
    if fill_missing and len(missing) == len(names):
        raise FeatureMismatchError("no feature in common")
    cols = [
        m.column(f) if f in m.feature_names else np.zeros(m.n) for f in names
    ]
    rows = np.column_stack(cols) if cols else np.zeros((m.n, 0))
    return dataclasses.replace(m, rows=rows, feature_names=names)


def producer_group(frame: TelemetryFrame, producer, power_metric: str | None = None):
    """Cleaned ``(U, x, U - x)`` for one producer, sharing rows and columns.

    Column cleaning is decided on U: a column that is all zero in U is all zero
    in both of its parts, since rates are non-negative.
    """
    frame = to_rates(frame)
    if not frame.target_ids:
        raise EmptyTargetSetError("every container is marked as background")
    U = clean(extract(frame, producer, Origin.AGGREGATE_ALL, power_metric=power_metric))
    x = restrict(extract(frame, producer, Origin.AGGREGATE_TARGETS, power_metric=power_metric), U)
    bg = restrict(extract(frame, producer, Origin.BACKGROUND_COMPLEMENT, power_metric=power_metric), U)
    return U, x, bg
