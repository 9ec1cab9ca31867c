"""Bagged Gini random forests with impurity-decrease importances."""
from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from cqa._seeding import derive_seed
from cqa.errors import DataError
from cqa.learners import _kernels
from cqa.learners.config import SolverConfig

# splits must beat this impurity decrease (fraction of root weight); guards
# against float noise registering as a split on pure or constant nodes
MIN_DECREASE = 1e-12


@dataclass(frozen=True)
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)


@dataclass(frozen=True)
class ForestModel:
    trees: tuple[Tree, ...]
    importances: np.ndarray
    n_features: int
    n_classes: int
    constant_class: int | None = None

    def predict_proba(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DataError(f"expected {self.n_features} features, got shape {X.shape}")
        out = np.zeros((X.shape[0], self.n_classes))
        if self.constant_class is not None:
            out[:, self.constant_class] = 1.0
            return out
        for t in self.trees:
            _kernels.tree_predict_proba(X, t.feature, t.threshold, t.left, t.right, t.value, out)
        return out / len(self.trees)

    def predict(self, X) -> tuple[np.ndarray, np.ndarray]:
        proba = self.predict_proba(X)
        return np.argmax(proba, axis=1).astype(np.int64), proba


def column_hashes(X: np.ndarray) -> np.ndarray:
    """64-bit content fingerprint per column.

    Exact duplicate columns are told apart by their occurrence rank so the
    split tie-break still distinguishes them.
    """
    out = np.empty(X.shape[1], dtype=np.uint64)
    seen: dict[bytes, int] = {}
    for f in range(X.shape[1]):
        raw = np.ascontiguousarray(X[:, f]).tobytes()
        rank = seen.get(raw, 0)
        seen[raw] = rank + 1
        h = hashlib.blake2b(raw, digest_size=8)
        if rank:
            h.update(rank.to_bytes(8, "little"))
        out[f] = int.from_bytes(h.digest(), "little")
    return out


def _grow(X, y, n_classes, col_hash, cfg, seed, t, max_features, presorted):
    tree_seed = derive_seed(seed, "tree", t)
    rng = np.random.default_rng(tree_seed)
    n = X.shape[0]
    weight = np.bincount(rng.integers(0, n, size=n), minlength=n).astype(np.float64)
    f, thr, lft, rgt, val, imp = _kernels.grow_tree(
        X, y, weight, n_classes, col_hash, np.uint64(tree_seed), int(cfg.forest_max_depth),
        max_features, MIN_DECREASE, presorted)
    return Tree(f, thr, lft, rgt, val), imp


def train_forest(X, y, cfg: SolverConfig = SolverConfig(), *, seed: int | None = None,
                 n_classes: int | None = None, jobs: int = 1) -> ForestModel:
    """Random forest of bootstrap CART trees.

    Each tree sees a bootstrap resample and draws ``cfg.max_features(p)``
    candidate features per split. Importances are the total Gini decrease per
    feature (weighted by node sample fraction), averaged over trees and
    normalised to sum to 1; a forest that never splits reports all zeros.
    Tree ``t`` is seeded from ``(seed, t)`` so ``jobs > 1`` reproduces the
    sequential result exactly.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int64)
    if X.ndim != 2 or len(y) != X.shape[0]:
        raise DataError(f"X shape {X.shape} and y length {len(y)} disagree")
    if X.shape[0] < 2:
        raise DataError("train_forest needs at least two rows")
    if not np.all(np.isfinite(X)):
        raise DataError("X contains non-finite values")
    p = X.shape[1]
    m = max(int(y.max()) + 1, n_classes or 2)
    seed = cfg.seed if seed is None else seed
    classes = np.unique(y)
    if len(classes) == 1:
        return ForestModel((), np.zeros(p), p, m, constant_class=int(classes[0]))

    col_hash = column_hashes(X)
    mf = cfg.max_features(p)
    presorted = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable").T)
    args = [(X, y, m, col_hash, cfg, seed, t, mf, presorted) for t in range(int(cfg.forest_trees))]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            grown = list(ex.map(lambda a: _grow(*a), args))
    else:
        grown = [_grow(*a) for a in args]
    trees = tuple(g[0] for g in grown)
    imp = np.zeros(p)
    for _, ti in grown:
        imp += ti
    imp /= len(grown)
    total = imp.sum()
    imp = imp / total if total > 0 else np.zeros(p)
    return ForestModel(trees, imp, p, m)
