"""Workload power labeling: isolation goodness, candidate selection and baseline isolators."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from . import regressors
from .errors import LengthMismatchError, MissingProfileError, NoCandidateError
from .extractor import FeatureMatrix
from .regressors import PowerModel

DEFAULT_RHO_THRESHOLD = 0.7


class Method(str, enum.Enum):
    PROPOSED = "proposed"
    PROFILING = "profiling"
    HEURISTIC_MIN = "heuristic_min"
    NONE = "none"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class IsolationConfig:
    rho_threshold: float = DEFAULT_RHO_THRESHOLD
    profile_background_watts: float | None = None
    clamp_negative_labels: bool = True

    def __post_init__(self):
        if not 0.0 <= self.rho_threshold <= 1.0:
            raise ValueError(f"rho_threshold must lie in [0, 1], got {self.rho_threshold}")


@dataclass(frozen=True)
class CandidateScore:
    candidate: str
    rho: float
    mae: float
    best_feature: str | None


@dataclass(frozen=True, eq=False)
class IsolationResult:
    labels: np.ndarray
    rho: float
    method: Method
    chosen_candidate: str | None = None
    candidate_mae: float | None = None
    best_feature: str | None = None
    raw_labels: np.ndarray | None = None
    scores: tuple = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "method": self.method.value,
            "rho": self.rho,
            "best_feature": self.best_feature,
            "chosen_candidate": self.chosen_candidate,
            "candidate_mae": self.candidate_mae,
            "labels": [float(v) for v in self.labels],
            "raw_labels": None if self.raw_labels is None else [float(v) for v in self.raw_labels],
            "candidates": [
                {"candidate": s.candidate, "rho": s.rho, "mae": s.mae, "best_feature": s.best_feature}
                for s in self.scores
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "IsolationResult":
        return cls(
            labels=np.asarray(d["labels"], dtype=np.float64),
            rho=d["rho"],
            method=Method(d["method"]),
            chosen_candidate=d.get("chosen_candidate"),
            candidate_mae=d.get("candidate_mae"),
            best_feature=d.get("best_feature"),
            raw_labels=None if d.get("raw_labels") is None else np.asarray(d["raw_labels"]),
            scores=tuple(CandidateScore(**s) for s in d.get("candidates", [])),
        )


def pearson(a, b) -> float:
    """Pearson correlation; 0 when either vector is constant."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LengthMismatchError(f"vectors of length {a.shape} and {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = np.dot(da, da), np.dot(db, db)
    if saa == 0.0 or sbb == 0.0:
        return 0.0
    r = float(np.dot(da, db) / np.sqrt(saa * sbb))
    return min(1.0, max(-1.0, r))


def isolation_goodness(x: FeatureMatrix, labels) -> tuple[float, str | None]:
    """Highest signed correlation between any target usage feature and the labels.

    The maximum is over the signed value, so a strongly anti-correlated feature
    does not raise the goodness.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if x.n != labels.shape[0]:
        raise LengthMismatchError(f"{x.n} usage rows vs {labels.shape[0]} labels")
    if x.n < 2:
        raise LengthMismatchError("isolation goodness needs at least two points")
    best, best_name = -np.inf, None
    for j, name in enumerate(x.feature_names):
        r = pearson(x.rows[:, j], labels)
        if r > best:
            best, best_name = r, name
    return float(best), best_name


def _finish(raw, cfg: IsolationConfig | None, x, method, **extra) -> IsolationResult:
    raw = np.asarray(raw, dtype=np.float64)
    clamp = True if cfg is None else cfg.clamp_negative_labels
    labels = np.maximum(raw, 0.0) if clamp else raw.copy()
    if "rho" not in extra:
        if x is not None and x.n >= 2:
            extra["rho"], extra["best_feature"] = isolation_goodness(x, labels)
        else:
            extra["rho"] = 0.0
    return IsolationResult(labels=labels, method=method, raw_labels=raw, **extra)


def is_better(rho, eps, best_rho, best_eps, rho_threshold) -> bool:
    """Acceptance test of a candidate against the incumbent (``best_rho is None`` = no incumbent).

    A challenger always needs a strictly lower error. It wins outright when its
    goodness reaches the threshold; otherwise only against an incumbent that is
    itself below the threshold and no better correlated.
    """
    if best_rho is None:
        return True
    if rho >= rho_threshold and eps < best_eps:
        return True
    return best_rho < rho_threshold and rho >= best_rho and eps < best_eps


def select(scores, rho_threshold: float) -> int:
    """Index of the winning ``(rho, eps)`` pair, scanning in list order."""
    best = None
    for i, (rho, eps) in enumerate(scores):
        if best is None or is_better(rho, eps, scores[best][0], scores[best][1], rho_threshold):
            best = i
    if best is None:
        raise NoCandidateError("no system model candidate given")
    return best


def label_proposed(U: FeatureMatrix, x: FeatureMatrix, P, candidates, cfg: IsolationConfig | None = None,
                   ) -> IsolationResult:
    """Label workload power as measured power minus each candidate's background prediction.

    Each candidate system model predicts the background power from ``U - x``.
    The winner is chosen on training error and isolation goodness.
    """
    cfg = cfg or IsolationConfig()
    candidates = list(candidates)
    if not candidates:
        raise NoCandidateError("no system model candidate given")
    P = np.asarray(P, dtype=np.float64)
    if not (U.n == x.n == P.shape[0]):
        raise LengthMismatchError(f"U has {U.n} rows, x {x.n}, P {P.shape[0]}")
    background = U.rows - x.rows
    scores, workload = [], []
    for i, m in enumerate(candidates):
        delta = P - regressors.predict(m, background)
        rho, feature = isolation_goodness(x, delta)
        scores.append(CandidateScore(m.model_id or f"candidate-{i}", rho, float(m.train_error_mae), feature))
        workload.append(delta)
    win = select([(s.rho, s.mae) for s in scores], cfg.rho_threshold)
    s = scores[win]
    labels = np.maximum(workload[win], 0.0) if cfg.clamp_negative_labels else workload[win]
    return IsolationResult(
        labels=labels,
        rho=s.rho,
        method=Method.PROPOSED,
        chosen_candidate=s.candidate,
        candidate_mae=s.mae,
        best_feature=s.best_feature,
        raw_labels=workload[win],
        scores=tuple(scores),
    )


def label_profiling(x: FeatureMatrix | None, P, cfg: IsolationConfig) -> IsolationResult:
    if cfg.profile_background_watts is None:
        raise MissingProfileError("profiling isolation needs the idling background power")
    P = np.asarray(P, dtype=np.float64)
    return _finish(P - cfg.profile_background_watts, cfg, x, Method.PROFILING)


def label_heuristic_min(U: FeatureMatrix | None, P, x: FeatureMatrix | None = None) -> IsolationResult:
    """Subtract min(P) as idle power.

    Goodness is measured against ``x`` when given (comparable with the other
    methods), otherwise against ``U``, which this baseline trains on.
    """
    P = np.asarray(P, dtype=np.float64)
    raw = P - P.min() if P.size else P
    return _finish(raw, None, x if x is not None else U, Method.HEURISTIC_MIN)


def label_none(P, x: FeatureMatrix | None = None) -> IsolationResult:
    return _finish(np.asarray(P, dtype=np.float64), IsolationConfig(clamp_negative_labels=False),
                   x, Method.NONE)


def dynamic_background(P, profile_watts: float | None, container_model: PowerModel, x) -> np.ndarray:
    """Background power above the idling profile: ``P - P_profile - M(x)`` per time point."""
    if profile_watts is None:
        raise MissingProfileError("dynamic background needs the idling background power")
    P = np.asarray(P, dtype=np.float64)
    pred = regressors.predict(container_model, x)
    if pred.shape != P.shape:
        raise LengthMismatchError(f"{P.shape[0]} power points vs {pred.shape[0]} usage rows")
    return P - profile_watts - pred
