from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cqa.errors import ConfigError, DataError
from cqa.learners import (
    LinearModel,
    SolverConfig,
    count_nonzero,
    enet_kkt_residuals,
    logistic_objective,
    predict,
    svm_objective,
    train_elastic_net_linear,
    train_forest,
    train_linear_svm,
    train_logistic,
)
from cqa.learners.forest import column_hashes


# ------------------------------------------------------------------ oracles


def grid_svm_optimum(X, y, C, span=4.0, steps=41, rounds=14):
    """Brute-force minimum of the SVM objective over (w1, w2, b).

    A full grid locates the basin; shrinking grids centred on the incumbent
    then refine it. The objective is convex so refinement cannot get stuck.
    """
    centre = np.zeros(3)
    best = np.inf
    width = span
    for _ in range(rounds):
        axes = [np.linspace(c - width, c + width, steps) for c in centre]
        W1, W2, B = np.meshgrid(*axes, indexing="ij")
        P = np.stack([W1.ravel(), W2.ravel(), B.ravel()], axis=1)
        s = 2.0 * y - 1.0
        margins = 1.0 - s[None, :] * (P[:, :2] @ X.T + P[:, 2:3])
        obj = 0.5 * (P ** 2).sum(axis=1) + C * np.maximum(margins, 0).sum(axis=1)
        i = int(np.argmin(obj))
        if obj[i] <= best:
            best, centre = float(obj[i]), P[i]
        width *= 0.35
    return best


def svm_problems():
    out = []
    rng = np.random.default_rng(7)
    X = np.vstack([rng.normal(-1, 1, (30, 2)), rng.normal(1, 1, (30, 2))])
    out.append((X, np.repeat([0, 1], 30), 1.0))
    X = rng.normal(size=(40, 2))
    out.append((X, (X[:, 0] - 0.5 * X[:, 1] > 0.3).astype(int), 0.5))
    X = rng.uniform(-2, 2, size=(25, 2))
    out.append((X, (rng.random(25) < 0.4).astype(int), 2.0))
    return out


@pytest.mark.parametrize("X, y, C", svm_problems())
def test_svm_matches_grid_oracle(X, y, C):
    model = train_linear_svm(X, y, SolverConfig(svm_c=C))
    got = svm_objective(model.weights[0], model.bias[0], X, y, C)
    oracle = grid_svm_optimum(X, y, C)
    assert got <= oracle * (1 + 1e-4)
    assert abs(got - oracle) / oracle <= 1e-4


def test_svm_symmetric_pair():
    X = np.array([[-1.0, 0.0], [1.0, 0.0]])
    m = train_linear_svm(X, [0, 1])
    w, b = m.weights[0], m.bias[0]
    assert abs(-b / w[0]) <= 1e-6
    labels, _ = m.predict(X)
    np.testing.assert_array_equal(labels, [0, 1])


def test_svm_gaussians_accuracy():
    rng = np.random.default_rng(3)
    def draw(n):
        y = np.repeat([0, 1], n // 2)
        X = rng.normal(size=(n, 2))
        X[:, 0] += np.where(y == 1, 2.0, -2.0)
        return X, y
    X, y = draw(200)
    Xt, yt = draw(2000)
    m = train_linear_svm(X, y)
    assert np.mean(m.predict(Xt)[0] == yt) >= 0.95


def test_svm_xor_not_separable():
    X = np.array([[0, 0], [1, 1], [0, 1], [1, 0]], dtype=float)
    y = np.array([0, 0, 1, 1])
    m = train_linear_svm(X, y)
    assert np.mean(m.predict(X)[0] == y) <= 0.75


def test_svm_single_class_errors():
    with pytest.raises(DataError, match="class"):
        train_linear_svm(np.zeros((3, 2)), [1, 1, 1])


def test_svm_multiclass_ovr():
    rng = np.random.default_rng(0)
    centres = np.array([[0, 4], [4, 0], [-4, -4]])
    y = np.repeat([0, 1, 2], 50)
    X = centres[y] + rng.normal(size=(150, 2))
    m = train_linear_svm(X, y)
    assert m.weights.shape == (3, 2)
    assert np.mean(m.predict(X)[0] == y) >= 0.97


def test_svm_deterministic():
    X, y, C = svm_problems()[0]
    a = train_linear_svm(X, y, SolverConfig(seed=1))
    b = train_linear_svm(X, y, SolverConfig(seed=99))
    np.testing.assert_array_equal(a.weights, b.weights)


# ------------------------------------------------------------------ logistic


def test_logistic_symmetric_bias_zero():
    X = np.array([[-2.0], [-1.0], [1.0], [2.0], [-0.5], [0.5]])
    y = np.array([0, 0, 1, 1, 1, 0])
    m = train_logistic(X, y, l2=0.01)
    assert abs(m.bias[0]) <= 1e-4


def test_logistic_balanced_probe():
    rng = np.random.default_rng(5)
    n = 2000
    y = (rng.random(n) < 0.1).astype(int)
    X = rng.normal(size=(n, 1)) + 1.0 * y[:, None]
    yp = np.repeat([0, 1], 1000)
    Xp = rng.normal(size=(2000, 1)) + 1.0 * yp[:, None]
    bal = np.mean(train_logistic(X, y, balanced=True).predict(Xp)[0])
    unbal = np.mean(train_logistic(X, y, balanced=False).predict(Xp)[0])
    assert 0.4 <= bal <= 0.6
    assert unbal < 0.3


def test_logistic_gradient_finite_differences():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(60, 4))
    y = (X[:, 0] + rng.normal(size=60) > 0).astype(int)
    sw = rng.uniform(0.5, 2.0, 60)
    w, b, h = rng.normal(size=4), 0.3, 1e-5
    _, g, gb = logistic_objective(w, b, X, y, l2=0.1, sample_weight=sw)
    fd = np.empty(4)
    for i in range(4):
        e = np.zeros(4)
        e[i] = h
        fd[i] = (logistic_objective(w + e, b, X, y, 0.1, sw)[0]
                 - logistic_objective(w - e, b, X, y, 0.1, sw)[0]) / (2 * h)
        assert abs(fd[i] - g[i]) <= 1e-4 * max(abs(fd[i]), 1e-8)
    fdb = (logistic_objective(w, b + h, X, y, 0.1, sw)[0]
           - logistic_objective(w, b - h, X, y, 0.1, sw)[0]) / (2 * h)
    assert abs(fdb - gb) <= 1e-4 * abs(fdb)


def test_logistic_stationary_point():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(300, 3))
    y = (X @ [1.0, -1.0, 0.5] + rng.normal(size=300) > 0).astype(int)
    m = train_logistic(X, y, l2=0.01)
    _, g, gb = logistic_objective(m.weights[0], m.bias[0], X, y, 0.01)
    assert np.linalg.norm(np.append(g, gb)) <= 1e-6 * (1 + np.linalg.norm(m.weights))


def test_logistic_single_class():
    with pytest.raises(DataError):
        train_logistic(np.zeros((4, 1)), [0, 0, 0, 0])


# ------------------------------------------------------------------ elastic net


def _enet_problem(seed=0, n=400, p=20, m=3):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    Wt = np.zeros((m, p))
    Wt[:, :4] = rng.normal(scale=2.0, size=(m, 4))
    y = np.argmax(X @ Wt.T + rng.gumbel(size=(n, m)), axis=1)
    return X, y


def test_enet_lambda_zero_matches_logistic():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(300, 3))
    y = (X @ [1.0, 0.5, -1.0] + rng.logistic(size=300) > 0).astype(int)
    en = train_elastic_net_linear(X, y, SolverConfig(elastic_lambda=0.0), n_classes=2)
    lg = train_logistic(X, y)
    w_en = en.weights[1] - en.weights[0]
    assert np.linalg.norm(w_en - lg.weights[0]) <= 1e-3


@pytest.mark.parametrize("lam", [1e-5, 7e-4, 1e-2])
def test_enet_kkt(lam):
    X, y = _enet_problem()
    cfg = SolverConfig(elastic_lambda=lam)
    m = train_elastic_net_linear(X, y, cfg)
    r = enet_kkt_residuals(m, X, y, lam, cfg.elastic_alpha)
    assert r["zero"] <= 1e-6
    assert r["nonzero"] <= 1e-5
    assert r["bias"] <= 1e-5


def test_enet_sparsity_monotone():
    X, y = _enet_problem(seed=1)
    counts = [count_nonzero(train_elastic_net_linear(X, y, SolverConfig(elastic_lambda=lam)))
              for lam in (1e-5, 7e-4, 1e-2)]
    assert counts[0] >= counts[1] >= counts[2]
    assert counts[2] < counts[0]


def test_enet_exact_zeros():
    X, y = _enet_problem(seed=2)
    m = train_elastic_net_linear(X, y, SolverConfig(elastic_lambda=1e-2))
    W = m.weights
    assert np.any(W == 0.0)
    assert not np.any((W != 0) & (np.abs(W) < 1e-12))


# ------------------------------------------------------------------ forest


@pytest.mark.parametrize("seed", range(5))
def test_forest_copied_feature(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(2000, 9))
    X[:, 3] = rng.integers(0, 2, 2000)
    y = X[:, 3].astype(int)
    f = train_forest(X, y, SolverConfig(seed=seed))
    assert f.importances[3] >= 0.9
    assert abs(f.importances.sum() - 1.0) <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_forest_independent_target(seed):
    rng = np.random.default_rng(100 + seed)
    X = rng.normal(size=(2000, 8))
    y = rng.integers(0, 2, 2000)
    f = train_forest(X, y, SolverConfig(seed=seed))
    assert f.importances.max() <= 0.3


def test_forest_constant_target():
    X = np.random.default_rng(0).normal(size=(50, 4))
    f = train_forest(X, np.ones(50, dtype=int))
    np.testing.assert_array_equal(f.importances, np.zeros(4))
    labels, proba = predict(f, X)
    assert np.all(labels == 1) and np.all(proba[:, 1] == 1.0)


def test_forest_jobs_match_sequential():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(300, 6))
    y = (X[:, 0] + X[:, 1] > 0).astype(int)
    cfg = SolverConfig(forest_trees=12, seed=4)
    a = train_forest(X, y, cfg)
    b = train_forest(X, y, cfg, jobs=3)
    np.testing.assert_array_equal(a.importances, b.importances)
    np.testing.assert_array_equal(a.predict_proba(X), b.predict_proba(X))


def test_forest_column_permutation_invariance():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(400, 5))
    y = (X[:, 0] - X[:, 2] > 0).astype(int)
    cfg = SolverConfig(forest_trees=10, seed=3)
    perm = np.array([3, 0, 4, 2, 1])
    a = train_forest(X, y, cfg).importances
    b = train_forest(X[:, perm], y, cfg).importances
    np.testing.assert_allclose(b, a[perm], atol=1e-12)


def test_duplicate_columns_hash_apart():
    X = np.tile(np.arange(5.0)[:, None], (1, 3))
    h = column_hashes(X)
    assert len(set(h.tolist())) == 3


def test_forest_predict_width_check():
    f = train_forest(np.eye(4), [0, 1, 0, 1], SolverConfig(forest_trees=2))
    with pytest.raises(DataError):
        f.predict(np.zeros((2, 3)))


# ------------------------------------------------------------------ config and predict


def test_solver_config_validation():
    with pytest.raises(ConfigError):
        SolverConfig(svm_c=0)
    with pytest.raises(ConfigError):
        SolverConfig(elastic_alpha=1.5)
    with pytest.raises(ConfigError):
        SolverConfig(forest_feature_fraction="log2")
    with pytest.raises(ConfigError):
        SolverConfig(probe_feature_fraction=0.0)
    with pytest.raises(ConfigError):
        SolverConfig.from_json({"svm_cc": 1})
    cfg = SolverConfig(seed=5, forest_trees=7)
    assert SolverConfig.from_json(cfg.to_json()) == cfg
    assert SolverConfig().max_features(42) == 7
    assert SolverConfig().probe().max_features(42) == 42


def test_defaults_follow_reference_hyperparameters():
    cfg = SolverConfig()
    assert (cfg.svm_c, cfg.elastic_alpha, cfg.elastic_lambda, cfg.elastic_max_iters) == \
        (1.0, 0.99, 7e-4, 2000)


def test_argmax_ties_to_lower_class():
    m = LinearModel(np.zeros((3, 2)), np.zeros(3), 3)
    labels, _ = predict(m, np.ones((4, 2)))
    assert np.all(labels == 0)
    b = LinearModel(np.zeros((1, 2)), np.zeros(1), 2)
    assert np.all(predict(b, np.ones((2, 2)))[0] == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_svm_never_worse_than_zero_model(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(20, 2))
    y = np.r_[0, 1, rng.integers(0, 2, 18)]
    m = train_linear_svm(X, y)
    got = svm_objective(m.weights[0], m.bias[0], X, y, 1.0)
    assert got <= svm_objective(np.zeros(2), 0.0, X, y, 1.0) + 1e-9
