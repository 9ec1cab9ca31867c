from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from cqa import report
from cqa.datamodel import EvalReport
from cqa.errors import DataError
from cqa.learners import SolverConfig

CFG = SolverConfig(forest_trees=30, seed=5)


@pytest.fixture(scope="module")
def perfect(shapes_small):
    ds = shapes_small
    return report.evaluate_model(ds, ds.concepts, ds.labels, CFG, model_name="oracle",
                                 metadata={"timestamps": {"evaluated": "x"}})


def test_truth_as_prediction(perfect):
    r = perfect
    assert r.auc_c == 1.0 and r.leak == 0.0 and r.ois == 0.0 and r.f1_y == 1.0
    assert r.dis >= 0.95
    assert len(r.gap_curve) == 42 and r.model_name == "oracle"
    assert r.metadata["seed"] == 5


def test_test_rows_only_labels(shapes_small):
    ds = shapes_small
    te = ds.mask("test")
    r = report.evaluate_model(ds, ds.concepts, ds.labels.values[te],
                              SolverConfig(forest_trees=5, seed=1))
    assert r.f1_y == 1.0
    with pytest.raises(DataError, match="predicted labels"):
        report.evaluate_model(ds, ds.concepts, ds.labels.values[:7], CFG)


def test_errors_carry_context(shapes_small):
    ds = shapes_small
    with pytest.raises(DataError, match="predicted concepts"):
        report.evaluate_model(ds, ds.concepts.values[:, :3], ds.labels, CFG)


def test_json_round_trip(perfect, tmp_path):
    p = tmp_path / "r.json"
    report.save_report(perfect, p)
    assert json.loads(p.read_text())["schema"] == "#cqa-report v1"
    back = report.load_report(p)
    assert report.dumps_report(back) == report.dumps_report(perfect)
    np.testing.assert_array_equal(back.relevance_learned.entries, perfect.relevance_learned.entries)
    assert back.per_concept_auc == perfect.per_concept_auc
    assert back.metric_row() == perfect.metric_row()


def test_bad_report_json():
    with pytest.raises(DataError):
        report.loads_report('{"schema": "other"}')
    with pytest.raises(DataError):
        report.loads_report("not json")


def test_aggregate_identical_runs(perfect):
    agg = report.aggregate([perfect] * 5)
    assert agg.n_runs == 5
    assert all(v == 0.0 for v in agg.std.values())
    assert agg.mean == perfect.metric_row()


def _variant(r: EvalReport, **metrics) -> EvalReport:
    return EvalReport(**{**r.__dict__, **metrics})


def test_aggregate_sample_std_and_permutation(perfect):
    runs = [_variant(perfect, f1_y=v) for v in (0.1, 0.4, 0.7, 0.25)]
    a = report.aggregate(runs)
    b = report.aggregate(runs[::-1])
    assert a.mean == b.mean and a.std == b.std
    assert a.std["f1_y"] == pytest.approx(np.std([0.1, 0.4, 0.7, 0.25], ddof=1), abs=1e-15)
    assert report.aggregate([perfect]).std["leak"] == 0.0
    with pytest.raises(DataError):
        report.aggregate([])


def test_aggregate_round_trip(perfect, tmp_path):
    agg = report.aggregate([perfect, _variant(perfect, dis=0.5)])
    p = tmp_path / "a.json"
    report.save_aggregate(agg, p)
    back = report.load_aggregate(p)
    assert report.dumps_aggregate(back) == report.dumps_aggregate(agg)


def test_gap_csv(perfect, tmp_path):
    r2 = _variant(perfect, gap_curve=tuple(np.linspace(-0.3, 0.2, 42)),
                  metadata={**perfect.metadata, "model": "second"})
    p = tmp_path / "g.csv"
    report.export_gap_curves([perfect, r2], p)
    rows = list(csv.DictReader(p.open()))
    assert list(rows[0]) == ["model", "ell", "concept_name", "gap", "f1_cbm", "f1_gt"]
    assert len(rows) == 84
    second = [row for row in rows if row["model"] == "second"]
    assert [float(row["gap"]) for row in second] == list(r2.gap_curve)
    assert [row["concept_name"] for row in second] == \
        [perfect.concept_names[j] for j in perfect.gap_order]
    assert [int(row["ell"]) for row in second] == list(range(1, 43))


def test_relevance_csv_exact(perfect, tmp_path):
    p = tmp_path / "h.csv"
    report.export_relevance_heatmaps(perfect, p)
    mats = report.read_relevance_csv(p)
    np.testing.assert_array_equal(mats["learned"], perfect.relevance_learned.entries)
    np.testing.assert_array_equal(mats["ground_truth"], perfect.relevance_gt.entries)


def test_digest_ignores_timestamps():
    a = {"x": 1, "timestamps": {"t": "1"}}
    b = {"x": 1, "timestamps": {"t": "2"}}
    assert report.config_digest(a) == report.config_digest(b)
    assert report.config_digest(a) != report.config_digest({"x": 2})
