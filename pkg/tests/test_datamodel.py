from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cqa import synth
from cqa.datamodel import (
    ConceptMatrix,
    LabelVector,
    RelevanceMatrix,
    Vocabulary,
    dumps_dataset,
    load_concepts,
    load_dataset,
    save_concepts,
    save_dataset,
)
from cqa.errors import DataError


MINIMAL = """#cqa-dataset v1 n=3 k=2 d=2 m=2
{"names": ["red", "round"], "groups": []}
train|0.5,1.25|1,0|1
val|-1,0|0,1|0
test|2,3|1,1|1
"""


def test_minimal_file_loads(tmp_path):
    p = tmp_path / "d.cqa"
    p.write_text(MINIMAL)
    ds = load_dataset(p)
    assert (ds.n, ds.k, ds.d, ds.m) == (3, 2, 2, 2)
    assert list(ds.split) == ["train", "val", "test"]
    np.testing.assert_array_equal(ds.concepts.values, [[1, 0], [0, 1], [1, 1]])
    assert ds.vocabulary.names == ("red", "round")


@pytest.mark.parametrize("bad, needle", [
    ("train|0.5,1.25|NaN,0|1", "row 0"),
    ("train|0.5,1.25|0.5,0|1", "column 0"),
    ("train|0.5|1,0|1", "feature section has 1 values"),
    ("bogus|0.5,1.25|1,0|1", "unknown split tag"),
    ("train|0.5,1.25|1,0|7", "outside [0, 2)"),
])
def test_malformed_rows_are_located(tmp_path, bad, needle):
    lines = MINIMAL.splitlines()
    lines[2] = bad
    p = tmp_path / "d.cqa"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError) as e:
        load_dataset(p)
    assert needle in str(e.value)
    assert "line 3" in str(e.value)


def test_nan_concept_names_row_and_column(tmp_path):
    lines = MINIMAL.splitlines()
    lines[3] = "val|-1,0|0,NaN|0"
    p = tmp_path / "d.cqa"
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(DataError, match=r"row 1.*column 1"):
        load_dataset(p)


def test_bad_header(tmp_path):
    p = tmp_path / "d.cqa"
    p.write_text(MINIMAL.replace("#cqa-dataset v1", "#cqa-dataset v9"))
    with pytest.raises(DataError, match="line 1"):
        load_dataset(p)
    p.write_text(MINIMAL.replace("n=3", "n=4"))
    with pytest.raises(DataError, match="n=4"):
        load_dataset(p)


def test_round_trip_1000_rows(tmp_path):
    ds = synth.generate_world(synth.shapes3d_like(n=1000, d=16, feature_noise=0.3, seed=5))
    p = tmp_path / "w.cqa"
    save_dataset(ds, p)
    back = load_dataset(p)
    np.testing.assert_array_equal(back.features, ds.features)
    np.testing.assert_array_equal(back.concepts.values, ds.concepts.values)
    np.testing.assert_array_equal(back.labels.values, ds.labels.values)
    np.testing.assert_array_equal(back.split, ds.split)
    assert back.vocabulary == ds.vocabulary
    assert dumps_dataset(back) == dumps_dataset(ds)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=6, max_size=6))
def test_score_round_trip_exact(tmp_path_factory, vals):
    cm = ConceptMatrix.scores(np.array(vals).reshape(3, 2))
    p = tmp_path_factory.mktemp("c") / "s.cqa"
    save_concepts(cm, p)
    back = load_concepts(p)
    assert back.kind == cm.kind
    np.testing.assert_array_equal(back.values, cm.values)


def test_binary_concepts_written_as_integers(tmp_path):
    cm = ConceptMatrix.binary([[1, 0], [0, 1]])
    p = tmp_path / "b.cqa"
    save_concepts(cm, p)
    assert p.read_text().splitlines()[1:] == ["1,0", "0,1"]


def test_eager_validation():
    with pytest.raises(DataError):
        Vocabulary(("a", "a"))
    with pytest.raises(DataError):
        Vocabulary(("a", ""))
    with pytest.raises(DataError):
        Vocabulary(("a", "b"), ((0, 1), (1,)))
    with pytest.raises(DataError):
        Vocabulary(("a", "b"), ((2,),))
    with pytest.raises(DataError):
        ConceptMatrix.binary([[0.5]])
    with pytest.raises(DataError):
        ConceptMatrix.scores([[np.inf]])
    with pytest.raises(DataError):
        LabelVector(np.array([0, 2]), 2)
    with pytest.raises(DataError):
        LabelVector(np.array([0, 1]), 1)
    with pytest.raises(DataError):
        RelevanceMatrix(np.array([[0.5, 0.0], [0.2, 1.0]]))


def test_immutable_arrays():
    cm = ConceptMatrix.binary([[1, 0]])
    with pytest.raises(ValueError):
        cm.values[0, 0] = 0


def test_relevance_allows_zero_columns():
    r = RelevanceMatrix(np.array([[1.0, 0.0], [0.0, 0.0]]))
    assert r.k == 2
