from __future__ import annotations

import numpy as np
import pytest

from cqa import synth
from cqa.datamodel import ConceptMatrix, LabeledDataset, LabelVector, Vocabulary


def make_dataset(C, y, X=None, split=None, m=None, groups=()):
    """LabeledDataset from raw arrays; features default to the concepts."""
    C = np.asarray(C, dtype=float)
    y = np.asarray(y, dtype=int)
    n, k = C.shape
    if X is None:
        X = C.copy()
    if split is None:
        split = synth.split_tags(n, 0)
    vocab = Vocabulary(tuple(f"c{j}" for j in range(k)), groups)
    return LabeledDataset(np.asarray(X, dtype=float), ConceptMatrix.binary(C),
                          LabelVector(y, m or max(2, int(y.max()) + 1)), vocab, split)


@pytest.fixture(scope="session")
def shapes_small():
    return synth.generate_world(synth.shapes3d_like(n=1500, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# (criterion, verdict line) pairs filled in by test_acceptance.py
ACCEPTANCE_LINES: list[tuple[int, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
