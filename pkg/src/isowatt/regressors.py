"""Power model learners behind a uniform fit / predict / incremental / persist contract.

Every approach standardizes its inputs with a scaler stored in the model, so a
restored archive predicts identically without access to the training data.
Labels (watts) are never scaled.
"""

from __future__ import annotations

import dataclasses
import glob
import hashlib
import json
import os
import re
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CorruptArchiveError,
    FeatureMismatchError,
    HyperParamError,
    LengthMismatchError,
    SingularFitError,
    StoreIOError,
    UnsupportedIncrementalError,
)
from .extractor import FeatureMatrix
from .telemetry import Producer

FORMAT_VERSION = 1
RIDGE_LAMBDA = 1e-6
APPROACHES = ("linear", "polynomial2", "knn", "gbr_stumps", "sgd_linear")
KINDS = ("system", "container")

DEFAULT_HYPER = {
    "linear": {},
    "polynomial2": {},
    "knn": {"k": 5, "weights": "distance"},
    "gbr_stumps": {"n_rounds": 200, "learning_rate": 0.1},
    "sgd_linear": {"learning_rate": 1e-3, "epochs": 100},
}


@dataclass(frozen=True, eq=False)
class PowerModel:
    approach: str
    producer: Producer
    feature_names: tuple
    scaler_mean: np.ndarray
    scaler_std: np.ndarray
    params: dict
    train_error_mae: float
    kind: str = "system"
    dataset_tag: str = ""
    hyper: dict = field(default_factory=dict)
    method: str | None = None
    n_train: int = 0
    model_id: str | None = None

    @property
    def scaler(self) -> list[tuple[float, float]]:
        return [(float(m), float(s)) for m, s in zip(self.scaler_mean, self.scaler_std)]


def mae(y, yhat) -> float:
    """Mean absolute error between labels and predictions."""
    y, yhat = np.asarray(y, dtype=np.float64), np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise LengthMismatchError(f"{y.shape} labels vs {yhat.shape} predictions")
    if y.size == 0:
        return 0.0
    return float(np.mean(np.abs(y - yhat)))


def resolve_hyper(approach: str, hyper: dict | None) -> dict:
    if approach not in APPROACHES:
        raise HyperParamError(f"unknown approach {approach!r}; choose from {', '.join(APPROACHES)}")
    merged = dict(DEFAULT_HYPER[approach])
    merged["seed"] = 0
    for key, value in (hyper or {}).items():
        if key not in merged:
            raise HyperParamError(f"{approach} has no hyperparameter {key!r}")
        merged[key] = value
    if approach == "knn":
        if not isinstance(merged["k"], int) or merged["k"] < 1:
            raise HyperParamError("knn needs an integer k >= 1")
        if merged["weights"] not in ("uniform", "distance"):
            raise HyperParamError("knn weights must be 'uniform' or 'distance'")
    if approach == "gbr_stumps":
        if not isinstance(merged["n_rounds"], int) or merged["n_rounds"] < 0:
            raise HyperParamError("n_rounds must be a non-negative integer")
        if not 0 < merged["learning_rate"] <= 1:
            raise HyperParamError("learning_rate must be in (0, 1]")
    if approach == "sgd_linear":
        if not isinstance(merged["epochs"], int) or merged["epochs"] < 0:
            raise HyperParamError("epochs must be a non-negative integer")
        if not merged["learning_rate"] > 0:
            raise HyperParamError("learning_rate must be positive")
    if not isinstance(merged["seed"], int) or not 0 <= merged["seed"] < 2**64:
        raise HyperParamError("seed must be a 64-bit unsigned integer")
    return merged


# -- linear and polynomial: least squares on accumulated sufficient statistics


def _design(Z: np.ndarray, approach: str) -> np.ndarray:
    cols = [np.ones((Z.shape[0], 1)), Z]
    if approach == "polynomial2":
        f = Z.shape[1]
        cols += [Z[:, [i]] * Z[:, [j]] for i in range(f) for j in range(i, f)]
    return np.hstack(cols)


def _solve_normal(xtx: np.ndarray, xty: np.ndarray) -> tuple[np.ndarray, float]:
    p = xtx.shape[0]
    if np.linalg.matrix_rank(xtx) == p:
        try:
            return np.linalg.solve(xtx, xty), 0.0
        except np.linalg.LinAlgError:
            pass
    ridge = np.eye(p) * RIDGE_LAMBDA
    ridge[0, 0] = 0.0  # intercept is not penalized
    try:
        coef = np.linalg.solve(xtx + ridge, xty)
    except np.linalg.LinAlgError as exc:
        raise SingularFitError(f"normal equations singular even with ridge: {exc}") from None
    if not np.all(np.isfinite(coef)):
        raise SingularFitError("ridge solution is not finite")
    return coef, RIDGE_LAMBDA


def _fit_least_squares(Z, y, approach, stats=None) -> dict:
    A = _design(Z, approach)
    xtx, xty = A.T @ A, A.T @ y
    n = Z.shape[0]
    if stats is not None:
        xtx = xtx + stats["xtx"]
        xty = xty + stats["xty"]
        n += int(stats["n"])
    coef, ridge = _solve_normal(xtx, xty)
    return {"coef": coef, "xtx": xtx, "xty": xty, "n": n, "ridge": ridge}


# -- k nearest neighbours


def _knn_predict(Z, params, k, weights) -> np.ndarray:
    E, labels = params["exemplars"], params["labels"]
    k = min(k, E.shape[0])
    out = np.empty(Z.shape[0])
    for lo in range(0, Z.shape[0], 256):
        q = Z[lo:lo + 256]
        d = np.sqrt(((q[:, None, :] - E[None, :, :]) ** 2).sum(axis=2))
        idx = np.argsort(d, axis=1, kind="stable")[:, :k]
        nd = np.take_along_axis(d, idx, axis=1)
        nl = labels[idx]
        if weights == "uniform":
            out[lo:lo + 256] = nl.mean(axis=1)
            continue
        for r in range(q.shape[0]):
            exact = nd[r] == 0.0
            if exact.any():
                out[lo + r] = nl[r][exact].mean()
            else:
                w = 1.0 / nd[r]
                out[lo + r] = np.dot(w, nl[r]) / w.sum()
    return out


# -- gradient boosted depth-1 trees


def best_stump(Z: np.ndarray, r: np.ndarray):
    """Squared-error stump on residuals ``r``.

    Returns ``(feature, threshold, left_value, right_value)`` or ``None`` when
    no feature has two distinct values. Ties go to the lower feature index,
    then the lower threshold.
    """
    n = Z.shape[0]
    best, best_gain = None, -np.inf
    for j in range(Z.shape[1]):
        order = np.argsort(Z[:, j], kind="stable")
        zs, rs = Z[order, j], r[order]
        cs = np.cumsum(rs)[:-1]
        total = rs.sum()
        valid = zs[:-1] < zs[1:]
        if not valid.any():
            continue
        nl = np.arange(1, n)
        gain = np.where(valid, cs**2 / nl + (total - cs) ** 2 / (n - nl), -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best_gain:
            best_gain = gain[i]
            best = (j, (zs[i] + zs[i + 1]) / 2, cs[i] / (i + 1), (total - cs[i]) / (n - i - 1))
    return best


def _gbr_raw(Z, params) -> np.ndarray:
    out = np.full(Z.shape[0], params["init"])
    lr = params["learning_rate"]
    for f, t, left, right in zip(
        params["feature"].astype(int), params["threshold"], params["left"], params["right"]
    ):
        out += lr * np.where(Z[:, f] <= t, left, right)
    return out


def _fit_stumps(Z, residual, n_rounds, lr):
    stumps = []
    r = residual.copy()
    for _ in range(n_rounds):
        s = best_stump(Z, r)
        if s is None:
            break
        f, t, left, right = s
        r -= lr * np.where(Z[:, f] <= t, left, right)
        stumps.append(s)
    return stumps


def _stump_arrays(stumps) -> dict:
    cols = list(zip(*stumps)) if stumps else [(), (), (), ()]
    return {
        "feature": np.asarray(cols[0], dtype=np.float64),
        "threshold": np.asarray(cols[1], dtype=np.float64),
        "left": np.asarray(cols[2], dtype=np.float64),
        "right": np.asarray(cols[3], dtype=np.float64),
    }


# -- plain stochastic gradient descent on squared loss


def _sgd(Z, y, w, b, lr, epochs, rng):
    w = [float(v) for v in w]
    rows = Z.tolist()
    f = len(w)
    for _ in range(epochs):
        for i in rng.permutation(len(rows)).tolist():
            z = rows[i]
            err = b - y[i]
            for j in range(f):
                err += w[j] * z[j]
            step = lr * err
            for j in range(f):
                w[j] -= step * z[j]
            b -= step
    return np.array(w), b


# -- public contract


def _as_rows(rows) -> np.ndarray:
    if isinstance(rows, FeatureMatrix):
        rows = rows.rows
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim == 1 and X.size == 0:
        X = X.reshape(0, 0)
    return X


def _standardize(model: PowerModel, X: np.ndarray) -> np.ndarray:
    return (X - model.scaler_mean) / model.scaler_std


def predict_raw(model: PowerModel, rows) -> np.ndarray:
    """Model output before clamping at zero watts."""
    X = _as_rows(rows)
    if X.shape[0] == 0:
        return np.zeros(0)
    if X.ndim != 2 or X.shape[1] != len(model.feature_names):
        raise FeatureMismatchError(
            f"model expects {len(model.feature_names)} features, got shape {X.shape}"
        )
    Z = _standardize(model, X)
    p = model.params
    if model.approach in ("linear", "polynomial2"):
        return _design(Z, model.approach) @ p["coef"]
    if model.approach == "knn":
        return _knn_predict(Z, p, model.hyper["k"], model.hyper["weights"])
    if model.approach == "gbr_stumps":
        return _gbr_raw(Z, p)
    if model.approach == "sgd_linear":
        return Z @ p["weights"] + p["bias"]
    raise HyperParamError(f"unknown approach {model.approach!r}")


def predict(model: PowerModel, rows) -> np.ndarray:
    """Predicted watts, clamped below at zero."""
    return np.maximum(predict_raw(model, rows), 0.0)


def _check_training(m: FeatureMatrix):
    if m.labels is None:
        raise LengthMismatchError("feature matrix carries no labels")
    if m.n < 2:
        raise LengthMismatchError("need at least two training rows")


def fit(approach: str, m: FeatureMatrix, hyper: dict | None = None, *, kind: str = "system",
        dataset_tag: str = "", method: str | None = None) -> PowerModel:
    _check_training(m)
    hyper = resolve_hyper(approach, hyper)
    X, y = m.rows, m.labels
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    Z = (X - mean) / std
    if approach in ("linear", "polynomial2"):
        params = _fit_least_squares(Z, y, approach)
    elif approach == "knn":
        params = {"exemplars": Z.copy(), "labels": y.copy()}
    elif approach == "gbr_stumps":
        init = float(y.mean())
        stumps = _fit_stumps(Z, y - init, hyper["n_rounds"], hyper["learning_rate"])
        params = {"init": init, "learning_rate": float(hyper["learning_rate"]), **_stump_arrays(stumps)}
    else:
        rng = np.random.default_rng(hyper["seed"])
        w, b = _sgd(Z, y.tolist(), np.zeros(Z.shape[1]), 0.0, hyper["learning_rate"],
                    hyper["epochs"], rng)
        params = {"weights": w, "bias": b, "updates": 0}
    model = PowerModel(
        approach=approach,
        producer=m.producer,
        feature_names=m.feature_names,
        scaler_mean=mean,
        scaler_std=std,
        params=params,
        train_error_mae=0.0,
        kind=kind,
        dataset_tag=dataset_tag,
        hyper=hyper,
        method=method,
        n_train=m.n,
    )
    return dataclasses.replace(model, train_error_mae=mae(y, predict(model, X)))


def fit_incremental(model: PowerModel, m: FeatureMatrix, hyper: dict | None = None) -> PowerModel:
    """Update ``model`` with a new batch, keeping its scaler fixed.

    ``train_error_mae`` of the result is measured on the new batch.
    """
    _check_training(m)
    if tuple(m.feature_names) != tuple(model.feature_names):
        raise FeatureMismatchError(
            f"batch features {list(m.feature_names)} != model features {list(model.feature_names)}"
        )
    merged = dict(model.hyper)
    merged.update(hyper or {})
    merged = resolve_hyper(model.approach, merged)
    Z = _standardize(model, m.rows)
    y = m.labels
    p = model.params
    if model.approach in ("linear", "polynomial2"):
        params = _fit_least_squares(Z, y, model.approach, stats=p)
    elif model.approach == "knn":
        params = {
            "exemplars": np.vstack([p["exemplars"], Z]),
            "labels": np.concatenate([p["labels"], y]),
        }
    elif model.approach == "gbr_stumps":
        residual = y - _gbr_raw(Z, p)
        old = list(zip(p["feature"].astype(int), p["threshold"], p["left"], p["right"]))
        stumps = old + _fit_stumps(Z, residual, merged["n_rounds"], p["learning_rate"])
        params = {"init": p["init"], "learning_rate": p["learning_rate"], **_stump_arrays(stumps)}
    elif model.approach == "sgd_linear":
        updates = int(p["updates"]) + 1
        rng = np.random.default_rng([merged["seed"], updates])
        w, b = _sgd(Z, y.tolist(), p["weights"], float(p["bias"]), merged["learning_rate"],
                    merged["epochs"], rng)
        params = {"weights": w, "bias": b, "updates": updates}
    else:
        raise UnsupportedIncrementalError(model.approach)
    updated = dataclasses.replace(
        model, params=params, hyper=merged, n_train=model.n_train + m.n, model_id=None
    )
    return dataclasses.replace(updated, train_error_mae=mae(y, predict(updated, m.rows)))


def linear_coefficients(model: PowerModel) -> tuple[np.ndarray, float]:
    """Slopes and intercept in unscaled feature units (linear and sgd_linear only)."""
    if model.approach == "linear":
        beta0, beta = model.params["coef"][0], model.params["coef"][1:]
    elif model.approach == "sgd_linear":
        beta0, beta = model.params["bias"], model.params["weights"]
    else:
        raise HyperParamError(f"{model.approach} has no linear coefficients")
    slopes = beta / model.scaler_std
    return slopes, float(beta0 - np.dot(slopes, model.scaler_mean))


# -- model store


def _encode(value):
    if isinstance(value, np.ndarray):
        return {"__ndarray__": value.astype(np.float64).ravel().tolist(), "shape": list(value.shape)}
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def _decode(value):
    if isinstance(value, dict) and "__ndarray__" in value:
        return np.array(value["__ndarray__"], dtype=np.float64).reshape(value["shape"])
    return value


def payload_bytes(model: PowerModel) -> bytes:
    params = {k: _encode(v) for k, v in model.params.items()}
    return json.dumps(params, sort_keys=True, separators=(",", ":")).encode()


def _safe(part: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", part) or "_"


def _archive_dirs(store) -> list[str]:
    return glob.glob(os.path.join(glob.escape(str(store)), "*", "*", "*", "*", "*", "metadata.json"))


def _next_sequence(store) -> int:
    seqs = [0]
    for path in _archive_dirs(store):
        head = os.path.basename(os.path.dirname(path)).split("-", 1)[0]
        if head.isdigit():
            seqs.append(int(head))
    return max(seqs) + 1


def save(model: PowerModel, store) -> str:
    """Write ``model`` to ``store`` and return its new id.

    Layout: ``store/<producer>/<kind>/<approach>/<dataset_tag>/<id>/``. The
    archive is staged in a temporary directory and renamed into place.
    """
    payload = payload_bytes(model)
    checksum = hashlib.sha256(payload).hexdigest()
    parent = os.path.join(
        str(store), model.producer.value, model.kind, model.approach, _safe(model.dataset_tag)
    )
    try:
        os.makedirs(parent, exist_ok=True)
        staging = tempfile.mkdtemp(prefix=".staging-", dir=str(store))
    except OSError as exc:
        raise StoreIOError(f"cannot write to store {store}: {exc}") from None
    try:
        for _ in range(1000):
            seq = _next_sequence(store)
            model_id = f"{seq:06d}-{checksum[:12]}"
            meta = {
                "id": model_id,
                "sequence": seq,
                "format_version": FORMAT_VERSION,
                "approach": model.approach,
                "producer": model.producer.value,
                "feature_names": list(model.feature_names),
                "scaler": model.scaler,
                "train_error_mae": float(model.train_error_mae),
                "kind": model.kind,
                "dataset_tag": model.dataset_tag,
                "method": model.method,
                "hyper": model.hyper,
                "n_train": int(model.n_train),
                "checksum": checksum,
            }
            with open(os.path.join(staging, "params.json"), "wb") as fh:
                fh.write(payload)
            with open(os.path.join(staging, "metadata.json"), "w", encoding="utf-8") as fh:
                json.dump(meta, fh, indent=2, sort_keys=True)
                fh.write("\n")
            try:
                os.rename(staging, os.path.join(parent, model_id))
                return model_id
            except OSError:
                if not os.path.exists(os.path.join(parent, model_id)):
                    raise
        raise StoreIOError("could not allocate a model id")
    except OSError as exc:
        raise StoreIOError(f"cannot write archive: {exc}") from None


def list_archives(store) -> list[dict]:
    """Metadata of every archive in ``store``, ordered by save sequence."""
    metas = []
    for path in _archive_dirs(store):
        try:
            with open(path, encoding="utf-8") as fh:
                metas.append(json.load(fh))
        except (OSError, json.JSONDecodeError):
            continue
    return sorted(metas, key=lambda m: m.get("sequence", 0))


def find_archive(store, model_id: str) -> str:
    if not os.path.isdir(str(store)):
        raise StoreIOError(f"no model store at {store}")
    hits = glob.glob(os.path.join(glob.escape(str(store)), "*", "*", "*", "*", glob.escape(model_id)))
    if not hits:
        raise StoreIOError(f"model {model_id!r} not found in {store}")
    return hits[0]


def load(store, model_id: str) -> PowerModel:
    path = find_archive(store, model_id)
    try:
        with open(os.path.join(path, "metadata.json"), encoding="utf-8") as fh:
            meta = json.load(fh)
        with open(os.path.join(path, "params.json"), "rb") as fh:
            payload = fh.read()
    except json.JSONDecodeError as exc:
        raise CorruptArchiveError(f"{model_id}: unreadable metadata ({exc})") from None
    except OSError as exc:
        raise StoreIOError(f"{model_id}: {exc}") from None
    if meta.get("format_version") != FORMAT_VERSION:
        raise CorruptArchiveError(f"{model_id}: unsupported format_version {meta.get('format_version')!r}")
    if hashlib.sha256(payload).hexdigest() != meta.get("checksum"):
        raise CorruptArchiveError(f"{model_id}: payload checksum mismatch")
    try:
        params = {k: _decode(v) for k, v in json.loads(payload).items()}
        scaler = np.array(meta["scaler"], dtype=np.float64).reshape(-1, 2)
        return PowerModel(
            approach=meta["approach"],
            producer=Producer(meta["producer"]),
            feature_names=tuple(meta["feature_names"]),
            scaler_mean=scaler[:, 0],
            scaler_std=scaler[:, 1],
            params=params,
            train_error_mae=meta["train_error_mae"],
            kind=meta["kind"],
            dataset_tag=meta["dataset_tag"],
            hyper=meta["hyper"],
            method=meta.get("method"),
            n_train=meta.get("n_train", 0),
            model_id=meta["id"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptArchiveError(f"{model_id}: malformed archive ({exc})") from None
