"""Training pipeline: system candidates, isolation, container models, model store."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from . import regressors
from .errors import NoModelError, StoreIOError
from .extractor import FeatureMatrix, Origin, extract, producer_group, select_features, to_rates
from .isolator import (
    IsolationConfig,
    IsolationResult,
    Method,
    label_heuristic_min,
    label_none,
    label_profiling,
    label_proposed,
)
from .telemetry import Producer, TelemetryFrame

RUNS_DIR = "_runs"


@dataclass
class PipelineRun:
    dataset_tag: str
    producer: Producer
    isolation: IsolationResult
    candidates: list = field(default_factory=list)
    container_models: dict = field(default_factory=dict)
    container_errors: dict = field(default_factory=dict)
    method: Method = Method.PROPOSED
    kept_rows: tuple = ()

    def to_dict(self) -> dict:
        return {
            "dataset_tag": self.dataset_tag,
            "producer": self.producer.value,
            "method": self.method.value,
            "candidates": list(self.candidates),
            "container_models": dict(self.container_models),
            "container_errors": dict(self.container_errors),
            "isolation": self.isolation.to_dict(),
            "kept_rows": list(self.kept_rows),
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kwargs)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineRun":
        return cls(
            dataset_tag=d["dataset_tag"],
            producer=Producer(d["producer"]),
            isolation=IsolationResult.from_dict(d["isolation"]),
            candidates=list(d["candidates"]),
            container_models=dict(d["container_models"]),
            container_errors=dict(d["container_errors"]),
            method=Method(d["method"]),
            kept_rows=tuple(d.get("kept_rows", ())),
        )


def _hyper_for(approach, hyper, seed):
    h = dict((hyper or {}).get(approach, {}))
    h.setdefault("seed", seed)
    return h


def isolate(frame: TelemetryFrame, producer, method=Method.PROPOSED, cfg: IsolationConfig | None = None,
            approaches=("linear",), hyper=None, seed: int = 0, dataset_tag: str = "",
            power_metric: str | None = None):
    """Steps 1 to 3 for one frame.

    Returns ``(U, x, isolation, system_models)``; ``system_models`` is empty
    for the baseline methods.
    """
    cfg = cfg or IsolationConfig()
    method = Method(method)
    U, x, _ = producer_group(frame, producer, power_metric)
    P = U.labels
    systems = []
    if method is Method.PROPOSED:
        systems = [
            regressors.fit(a, U, _hyper_for(a, hyper, seed), kind="system", dataset_tag=dataset_tag,
                           method=method.value)
            for a in approaches
        ]
        result = label_proposed(U, x, P, systems, cfg)
    elif method is Method.PROFILING:
        result = label_profiling(x, P, cfg)
    elif method is Method.HEURISTIC_MIN:
        result = label_heuristic_min(U, P, x)
    else:
        result = label_none(P, x)
    return U, x, result, systems


def _training_matrix(method: Method, U: FeatureMatrix, x: FeatureMatrix, labels) -> FeatureMatrix:
    # the heuristic and no-isolation baselines train on usage of all containers
    base = U if method in (Method.HEURISTIC_MIN, Method.NONE) else x
    return base.with_labels(labels)


def run(frame: TelemetryFrame, producer, cfg: IsolationConfig | None = None, approaches=("linear",),
        store=None, *, method=Method.PROPOSED, dataset_tag: str = "", hyper=None, seed: int = 0,
        power_metric: str | None = None, save_run: bool = True) -> PipelineRun:
    """Train system candidates, isolate workload power and fit one container model per approach.

    With ``store`` set, every model is archived and the run record is written
    under ``store/_runs/``.
    """
    method = Method(method)
    approaches = list(approaches)
    U, x, result, systems = isolate(frame, producer, method, cfg, approaches, hyper, seed, dataset_tag,
                                    power_metric)
    candidates = []
    if store is not None and systems:
        candidates = [regressors.save(m, store) for m in systems]
        result = _relabel_candidates(result, candidates)
    elif systems:
        candidates = [s.candidate for s in result.scores]

    train = _training_matrix(method, U, x, result.labels)
    models, errors = {}, {}
    for a in approaches:
        m = regressors.fit(a, train, _hyper_for(a, hyper, seed), kind="container",
                           dataset_tag=dataset_tag, method=method.value)
        models[a] = regressors.save(m, store) if store is not None else m
        errors[a] = m.train_error_mae
    out = PipelineRun(
        dataset_tag=dataset_tag,
        producer=Producer(producer),
        isolation=result,
        candidates=candidates,
        container_models=models,
        container_errors=errors,
        method=method,
        kept_rows=U.cleaning.kept_rows,
    )
    if store is not None and save_run:
        save_run_record(out, store)
    return out


def _relabel_candidates(result: IsolationResult, ids) -> IsolationResult:
    scores = tuple(dataclasses.replace(s, candidate=i) for s, i in zip(result.scores, ids))
    chosen = next(
        (i for s, i in zip(result.scores, ids) if s.candidate == result.chosen_candidate), None
    )
    return dataclasses.replace(result, scores=scores, chosen_candidate=chosen)


def run_online(prev: PipelineRun, frame: TelemetryFrame, cfg: IsolationConfig | None = None, store=None,
               *, dataset_tag: str | None = None, hyper=None, seed: int = 0,
               power_metric: str | None = None, save_run: bool = True) -> PipelineRun:
    """Repeat isolation on a new batch, then update the previous container models incrementally."""
    if store is None:
        raise StoreIOError("online training loads checkpoints from a model store")
    dataset_tag = prev.dataset_tag if dataset_tag is None else dataset_tag
    approaches = list(prev.container_models)
    checkpoints = {a: regressors.load(store, mid) for a, mid in prev.container_models.items()}
    U, x, result, systems = isolate(frame, prev.producer, prev.method, cfg, approaches, hyper, seed,
                                    dataset_tag, power_metric)
    candidates = [regressors.save(m, store) for m in systems]
    if systems:
        result = _relabel_candidates(result, candidates)

    origin = Origin.AGGREGATE_ALL if prev.method in (Method.HEURISTIC_MIN, Method.NONE) else Origin.AGGREGATE_TARGETS
    full = extract(to_rates(frame), prev.producer, origin, power_metric=power_metric)
    kept = list(U.cleaning.kept_rows)
    models, errors = {}, {}
    for a, old in checkpoints.items():
        batch = FeatureMatrix(full.producer, full.feature_names, full.rows[kept], result.labels, origin)
        batch = select_features(batch, old.feature_names)
        new = regressors.fit_incremental(old, batch, _hyper_for(a, hyper, seed))
        new = _retag(new, dataset_tag)
        models[a] = regressors.save(new, store)
        errors[a] = new.train_error_mae
    out = PipelineRun(
        dataset_tag=dataset_tag,
        producer=prev.producer,
        isolation=result,
        candidates=candidates,
        container_models=models,
        container_errors=errors,
        method=prev.method,
        kept_rows=U.cleaning.kept_rows,
    )
    if save_run:
        save_run_record(out, store)
    return out


def _retag(model, tag):
    return dataclasses.replace(model, dataset_tag=tag)


def run_path(store, producer, method, dataset_tag) -> str:
    return os.path.join(str(store), RUNS_DIR, Producer(producer).value, Method(method).value,
                        f"{regressors._safe(dataset_tag)}.json")


def save_run_record(r: PipelineRun, store) -> str:
    path = run_path(store, r.producer, r.method, r.dataset_tag)
    try:
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path + ".tmp", "w", encoding="utf-8") as fh:
            fh.write(r.to_json(indent=None))
            fh.write("\n")
        os.replace(path + ".tmp", path)
    except OSError as exc:
        raise StoreIOError(f"cannot write run record: {exc}") from None
    return path


def load_run_record(store, producer, method, dataset_tag) -> PipelineRun:
    path = run_path(store, producer, method, dataset_tag)
    try:
        with open(path, encoding="utf-8") as fh:
            return PipelineRun.from_dict(json.load(fh))
    except FileNotFoundError:
        raise StoreIOError(
            f"no {Method(method).value} run for dataset {dataset_tag!r} in {store}"
        ) from None
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise StoreIOError(f"unreadable run record {path}: {exc}") from None


def select_best(store, producer, kind: str, *, method=None, approach: str | None = None) -> str:
    """Id of the stored model with the lowest recorded training error; ties go to the newest."""
    producer = Producer(producer)
    best = None
    for meta in regressors.list_archives(store):
        if meta.get("producer") != producer.value or meta.get("kind") != kind:
            continue
        if method is not None and meta.get("method") != Method(method).value:
            continue
        if approach is not None and meta.get("approach") != approach:
            continue
        key = (meta["train_error_mae"], -meta.get("sequence", 0))
        if best is None or key < best[0]:
            best = (key, meta["id"])
    if best is None:
        raise NoModelError(f"no {kind} model for producer {producer.value} in {store}")
    return best[1]
