"""Error metrics, cross-dataset validation matrices and background power reports."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import regressors
from .errors import (
    DegenerateRangeError,
    EmptyInputError,
    FeatureMismatchError,
    LengthMismatchError,
    MissingProfileError,
)
from .extractor import FeatureMatrix, Origin, extract, select_features, to_rates
from .isolator import DEFAULT_RHO_THRESHOLD, IsolationResult, Method, dynamic_background
from .pipeline import PipelineRun
from .regressors import PowerModel, mae
from .telemetry import TelemetryFrame

TABLE2_FIELDS = ("dataset", "p0", "p_profile", "delta_p_min", "delta_p_bg")


def pct_err(eps: float, P, profile_watts: float) -> float:
    """Error as a percentage of the workload power range ``max(P) - P_profile``."""
    span = float(np.max(P)) - profile_watts
    if not span > 0:
        raise DegenerateRangeError(f"max(P)={np.max(P)} does not exceed P_profile={profile_watts}")
    return eps / span * 100.0


def goodness_fraction(results, threshold: float = DEFAULT_RHO_THRESHOLD) -> float:
    results = list(results)
    if not results:
        raise EmptyInputError("no isolation results")
    rhos = [r.rho if isinstance(r, IsolationResult) else float(r) for r in results]
    return sum(rho >= threshold for rho in rhos) / len(rhos)


def target_inputs(frame: TelemetryFrame, run: PipelineRun) -> tuple[FeatureMatrix, np.ndarray]:
    """Target usage of ``frame`` on the rows the run was trained with, plus measured watts."""
    x = extract(to_rates(frame), run.producer, Origin.AGGREGATE_TARGETS)
    kept = list(run.kept_rows) if run.kept_rows else list(range(x.n))
    x = FeatureMatrix(x.producer, x.feature_names, x.rows[kept], x.labels[kept], x.origin)
    return x, x.labels


def apply_model(model: PowerModel, x: FeatureMatrix) -> np.ndarray:
    """Predict on ``x`` using the shared features; features absent from ``x`` count as zero usage."""
    shared = set(model.feature_names) & set(x.feature_names)
    if not shared:
        raise FeatureMismatchError(f"model features {model.feature_names} share nothing with data")
    return regressors.predict(model, select_features(x, model.feature_names, fill_missing=True))


def _resolve_model(ref, store) -> PowerModel:
    if isinstance(ref, PowerModel):
        return ref
    return regressors.load(store, ref)


@dataclass
class CrossValidation:
    method: str
    approach: str
    producer: str
    datasets: list
    matrix: np.ndarray
    pct_matrix: np.ndarray | None = None

    @property
    def avg_ce(self) -> float:
        return float(np.mean(self.matrix))

    @property
    def avg_pct(self) -> float | None:
        return None if self.pct_matrix is None else float(np.mean(self.pct_matrix))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "approach": self.approach,
            "producer": self.producer,
            "datasets": list(self.datasets),
            "cross_matrix": self.matrix.tolist(),
            "avg_ce": self.avg_ce,
            "pct_err_matrix": None if self.pct_matrix is None else self.pct_matrix.tolist(),
            "avg_pct_err": self.avg_pct,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["test_dataset"] + [f"model_{d}" for d in self.datasets])
        for d, row in zip(self.datasets, self.matrix):
            w.writerow([d] + [repr(float(v)) for v in row])
        return buf.getvalue()


def cross_validate(runs, frames, method=None, approach: str = "linear", *, store=None, references=None,
                   profiles=None) -> CrossValidation:
    """Error of every dataset's container model on every dataset's target usage.

    Entry ``[i, j]`` is ``MAE(labels_i, M_j(x_i))`` where ``labels_i`` is
    ``references[i]`` when given (e.g. synthetic ground truth) and otherwise
    run ``i``'s isolated labels. ``profiles`` enables the %err matrix.
    """
    runs, frames = list(runs), list(frames)
    k = len(runs)
    if k == 0 or len(frames) != k:
        raise EmptyInputError(f"need matching non-empty runs and frames, got {k} and {len(frames)}")
    if method is None:
        method = runs[0].method
    method = Method(method)
    for r in runs:
        if r.method is not method:
            raise ValueError(f"run {r.dataset_tag} was trained with {r.method}, not {method}")
    models = [_resolve_model(r.container_models[approach], store) for r in runs]
    inputs = [target_inputs(f, r) for f, r in zip(frames, runs)]
    labels = []
    for i, (r, (x, _)) in enumerate(zip(runs, inputs)):
        ref = r.isolation.labels if references is None else np.asarray(references[i], dtype=np.float64)
        if ref.shape[0] != x.n:
            if r.kept_rows and ref.shape[0] > max(r.kept_rows):
                ref = ref[list(r.kept_rows)]
            else:
                raise LengthMismatchError(f"{ref.shape[0]} reference labels for {x.n} rows in {r.dataset_tag}")
        labels.append(ref)
    matrix = np.array([
        [mae(labels[i], apply_model(models[j], inputs[i][0])) for j in range(k)] for i in range(k)
    ])
    pct = None
    if profiles is not None:
        pct = np.array([
            [pct_err(matrix[i, j], inputs[i][1], profiles[i]) for j in range(k)] for i in range(k)
        ])
    return CrossValidation(method.value, approach, runs[0].producer.value,
                           [r.dataset_tag for r in runs], matrix, pct)


def min_over_approaches(results) -> CrossValidation:
    """Elementwise minimum over per-approach matrices of one method."""
    results = list(results)
    if not results:
        raise EmptyInputError("no cross-validation results")
    first = results[0]
    matrix = np.min([r.matrix for r in results], axis=0)
    pct = None
    if all(r.pct_matrix is not None for r in results):
        pct = np.min([r.pct_matrix for r in results], axis=0)
    return CrossValidation(first.method, "min", first.producer, first.datasets, matrix, pct)


@dataclass
class Table2Row:
    dataset: str
    p0: float
    p_profile: float
    delta_p_min: float
    delta_p_bg: float

    def as_list(self) -> list:
        return [self.dataset, self.p0, self.p_profile, self.delta_p_min, self.delta_p_bg]


def table2_row(dataset: str, P, x: FeatureMatrix, model: PowerModel, p0, p_profile) -> Table2Row:
    """``delta_p_min = min(P) - P_0``; ``delta_p_bg = mean(P - M(x)) - P_profile``."""
    if p0 is None or p_profile is None:
        raise MissingProfileError(f"{dataset}: idle power and idling background power are required")
    P = np.asarray(P, dtype=np.float64)
    bg = dynamic_background(P, p_profile, model, select_features(x, model.feature_names, fill_missing=True))
    return Table2Row(dataset, float(p0), float(p_profile), float(P.min() - p0), float(bg.mean()))


def table2_report(frames, runs, profiles, *, store=None, approach: str | None = None) -> list[Table2Row]:
    """One row per dataset; ``profiles[i]`` is ``(P_0, P_profile)``.

    The container model is ``approach`` or, by default, the run's model with
    the lowest training error.
    """
    rows = []
    for frame, r, (p0, p_profile) in zip(frames, runs, profiles):
        a = approach or min(r.container_errors, key=lambda k: (r.container_errors[k], k))
        model = _resolve_model(r.container_models[a], store)
        x, P = target_inputs(frame, r)
        rows.append(table2_row(r.dataset_tag, P, x, model, p0, p_profile))
    return rows


def table2_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TABLE2_FIELDS)
    for row in rows:
        w.writerow([row.dataset] + [repr(float(v)) for v in row.as_list()[1:]])
    return buf.getvalue()


def read_table2_csv(text: str) -> list[Table2Row]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != TABLE2_FIELDS:
        raise ValueError(f"table2 header must be {','.join(TABLE2_FIELDS)}")
    return [
        Table2Row(r["dataset"], float(r["p0"]), float(r["p_profile"]),
                  float(r["delta_p_min"]), float(r["delta_p_bg"]))
        for r in reader
    ]


@dataclass
class EvaluationReport:
    datasets: list
    cross: list = field(default_factory=list)
    table2: list = field(default_factory=list)
    goodness: dict = field(default_factory=dict)
    goodness_threshold: float = DEFAULT_RHO_THRESHOLD

    @property
    def avg_ce(self) -> dict:
        return {f"{c.method}/{c.approach}": c.avg_ce for c in self.cross}

    def to_dict(self) -> dict:
        return {
            "datasets": list(self.datasets),
            "cross_validation": [c.to_dict() for c in self.cross],
            "avg_ce": self.avg_ce,
            "table2": [dict(zip(TABLE2_FIELDS, r.as_list())) for r in self.table2],
            "delta_p_min": {r.dataset: r.delta_p_min for r in self.table2},
            "delta_p_bg_mean": {r.dataset: r.delta_p_bg for r in self.table2},
            "p0": {r.dataset: r.p0 for r in self.table2},
            "p_profile": {r.dataset: r.p_profile for r in self.table2},
            "high_goodness_fraction": dict(self.goodness),
            "goodness_threshold": self.goodness_threshold,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _write_atomic(path, text: str) -> None:
    with open(path + ".tmp", "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(path + ".tmp", path)


def write_report(report: EvaluationReport, out, plot: bool = False) -> list[str]:
    """Write ``cross_<method>_<approach>.csv``, ``table2.csv`` and ``report.json`` into ``out``."""
    os.makedirs(out, exist_ok=True)
    written = []
    for c in report.cross:
        path = os.path.join(out, f"cross_{c.method}_{c.approach}.csv")
        _write_atomic(path, c.to_csv())
        written.append(path)
        if plot:
            written.append(plot_heatmap(c, os.path.join(out, f"cross_{c.method}_{c.approach}.png")))
    if report.table2:
        path = os.path.join(out, "table2.csv")
        _write_atomic(path, table2_csv(report.table2))
        written.append(path)
    path = os.path.join(out, "report.json")
    _write_atomic(path, report.to_json())
    written.append(path)
    return written


def plot_heatmap(c: CrossValidation, path) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    k = len(c.datasets)
    fig, ax = plt.subplots(figsize=(1.0 + 0.8 * k, 0.8 + 0.7 * k))
    im = ax.imshow(c.matrix, cmap="Reds")
    ax.set_xticks(range(k), [str(d) for d in c.datasets], rotation=45, ha="right")
    ax.set_yticks(range(k), [str(d) for d in c.datasets])
    ax.set_xlabel("model trained on")
    ax.set_ylabel("tested on")
    for i in range(k):
        for j in range(k):
            ax.text(j, i, f"{c.matrix[i, j]:.1f}", ha="center", va="center", fontsize=7)
    ax.set_title(f"{c.method} / {c.approach}: avg cε = {c.avg_ce:.2f} W")
    fig.colorbar(im, ax=ax, label="MAE (W)")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
