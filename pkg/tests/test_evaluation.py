import json

import numpy as np
import pytest

import oracles
from isowatt import evaluation, regressors
from isowatt.errors import DegenerateRangeError, EmptyInputError, FeatureMismatchError, MissingProfileError
from isowatt.evaluation import (
    EvaluationReport,
    Table2Row,
    cross_validate,
    goodness_fraction,
    min_over_approaches,
    pct_err,
    read_table2_csv,
    table2_csv,
    table2_report,
    table2_row,
    target_inputs,
    write_report,
)
from isowatt.extractor import FeatureMatrix
from isowatt.isolator import IsolationConfig, Method, label_heuristic_min
from isowatt.pipeline import run
from isowatt.telemetry import Producer


def runs_for(grid, producer=Producer.HWCOUNTER, method=Method.PROPOSED, approaches=("linear",), idx=None):
    items = [grid[i] for i in idx] if idx is not None else grid
    runs = []
    for tag, frame, truth in items:
        cfg = IsolationConfig(profile_background_watts=truth.profile_background_watts)
        runs.append(run(frame, producer, cfg, approaches, method=method, dataset_tag=tag))
    return runs, [f for _, f, _ in items], [t for _, _, t in items]


def test_pct_err_examples():
    assert pct_err(5, [100, 150], 50) == 5.0
    assert pct_err(0, [100, 150], 50) == 0.0
    with pytest.raises(DegenerateRangeError):
        pct_err(1, [50, 50], 50)


def test_goodness_fraction():
    assert goodness_fraction([0.9, 0.5], 0.7) == 0.5
    assert goodness_fraction([0.9, 0.8]) == 1.0
    assert goodness_fraction([label_heuristic_min(None, [1, 2])], 0.7) == 0.0
    with pytest.raises(EmptyInputError):
        goodness_fraction([])


def test_k1_is_own_training_error(grid42):
    runs, frames, _ = runs_for(grid42, idx=[0])
    cv = cross_validate(runs, frames)
    assert cv.matrix.shape == (1, 1)
    assert cv.matrix[0, 0] == pytest.approx(runs[0].container_errors["linear"], abs=1e-12)


def test_identical_datasets_give_equal_entries(grid42):
    runs, frames, _ = runs_for(grid42, idx=[3, 3])
    cv = cross_validate(runs, frames)
    assert np.ptp(cv.matrix) < 1e-9


def test_matrix_matches_oracle(grid42):
    runs, frames, truths = runs_for(grid42, idx=[0, 4, 8])
    refs = [t.workload_watts for t in truths]
    cv = cross_validate(runs, frames, references=refs,
                        profiles=[t.profile_background_watts for t in truths])
    inputs = [target_inputs(f, r)[0].rows for f, r in zip(frames, runs)]
    labels = [np.asarray(ref)[list(r.kept_rows)].tolist() for ref, r in zip(refs, runs)]
    fns = [lambda rows, m=r.container_models["linear"]: regressors.predict(m, rows).tolist() for r in runs]
    matrix, avg = oracles.cross_error(labels, fns, inputs)
    assert np.max(np.abs(cv.matrix - np.array(matrix))) < 1e-12
    assert abs(cv.avg_ce - avg) < 1e-12
    assert abs(float(np.mean(cv.matrix)) - cv.to_dict()["avg_ce"]) < 1e-12
    assert np.all(cv.matrix >= 0) and np.all(cv.pct_matrix >= 0)
    P = target_inputs(frames[1], runs[1])[1]
    assert cv.pct_matrix[1, 2] == pytest.approx(
        oracles.pct_err(cv.matrix[1, 2], P.tolist(), truths[1].profile_background_watts), abs=1e-12)


def test_diagonal_not_above_row_means(grid42):
    runs, frames, truths = runs_for(grid42)
    cv = cross_validate(runs, frames)
    for i in range(len(runs)):
        assert cv.matrix[i, i] <= cv.matrix[i].mean()


def test_method_mismatch_rejected(grid42):
    a, frames, _ = runs_for(grid42, idx=[0])
    b, _, _ = runs_for(grid42, idx=[1], method=Method.NONE)
    with pytest.raises(ValueError):
        cross_validate(a + b, frames + frames)


def test_min_over_approaches(grid42):
    runs, frames, _ = runs_for(grid42, idx=[0, 1], approaches=("linear", "knn"))
    lin = cross_validate(runs, frames, approach="linear")
    knn = cross_validate(runs, frames, approach="knn")
    both = min_over_approaches([lin, knn])
    assert np.array_equal(both.matrix, np.minimum(lin.matrix, knn.matrix))
    assert both.approach == "min"


def test_table2_fixture_round_trip():
    text = "dataset,p0,p_profile,delta_p_min,delta_p_bg\n3.6GHz-BM,40.6,42.4,23.9,107.2\n"
    (row,) = read_table2_csv(text)
    assert row == Table2Row("3.6GHz-BM", 40.6, 42.4, 23.9, 107.2)
    assert table2_csv([row]) == text
    with pytest.raises(ValueError):
        read_table2_csv("a,b\n1,2\n")


def test_table2_constant_surge_and_idle():
    x = FeatureMatrix(Producer.BPF, ("cpu",), np.linspace(0, 5, 30)[:, None])
    workload = 8 * x.rows[:, 0]
    model = regressors.fit("linear", x.with_labels(workload))
    s, profile, p0 = 6.5, 45.0, 40.0
    P = profile + workload + s
    row = table2_row("d", P, x, model, p0, profile)
    assert abs(row.delta_p_bg - s) < 1e-6
    assert row.delta_p_min == pytest.approx(profile + s - p0)
    idle = table2_row("idle", np.full(30, p0), x, model, p0, profile)
    assert idle.delta_p_min == 0
    with pytest.raises(MissingProfileError):
        table2_row("d", P, x, model, None, profile)


def test_table2_report_on_grid(grid42):
    runs, frames, truths = runs_for(grid42, idx=[0, 1])
    rows = table2_report(frames, runs, [(t.idle_watts, t.profile_background_watts) for t in truths])
    assert [r.dataset for r in rows] == ["p1-w1", "p1-w2"]
    for r, t in zip(rows, truths):
        assert r.p0 == t.idle_watts and r.delta_p_min > 0


def test_report_byte_stable(grid42, tmp_path):
    outputs = []
    for k in range(2):
        runs, frames, truths = runs_for(grid42, idx=[0, 5])
        cv = cross_validate(runs, frames, profiles=[t.profile_background_watts for t in truths])
        t2 = table2_report(frames, runs, [(t.idle_watts, t.profile_background_watts) for t in truths])
        report = EvaluationReport([r.dataset_tag for r in runs], [cv], t2,
                                  {"proposed": goodness_fraction([r.isolation for r in runs])})
        out = tmp_path / f"r{k}"
        paths = write_report(report, str(out), plot=True)
        outputs.append({p.rsplit("/", 1)[1]: open(p, "rb").read() for p in paths})
    assert outputs[0] == outputs[1]
    assert set(outputs[0]) == {"cross_proposed_linear.csv", "cross_proposed_linear.png", "table2.csv", "report.json"}
    doc = json.loads(outputs[0]["report.json"])
    assert doc["avg_ce"]["proposed/linear"] == pytest.approx(np.mean(doc["cross_validation"][0]["cross_matrix"]),
                                                             abs=1e-12)


def test_goodness_proposed_not_below_heuristic(grid42):
    prop, _, _ = runs_for(grid42)
    heur, _, _ = runs_for(grid42, method=Method.HEURISTIC_MIN)
    assert goodness_fraction([r.isolation for r in prop]) >= goodness_fraction([r.isolation for r in heur])


def test_apply_model_feature_intersection():
    m = regressors.fit("linear", FeatureMatrix(Producer.BPF, ("a", "b"), [[1, 0], [2, 1], [3, 0], [4, 2]],
                                               [10, 21, 30, 42]))
    x = FeatureMatrix(Producer.BPF, ("a", "c"), [[1, 5], [2, 5]])
    np.testing.assert_allclose(evaluation.apply_model(m, x), regressors.predict(m, [[1, 0], [2, 0]]))
    with pytest.raises(FeatureMismatchError):
        evaluation.apply_model(m, FeatureMatrix(Producer.BPF, ("z",), [[1], [2]]))
