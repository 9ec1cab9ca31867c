"""Concept-quality metrics: F1(Y), AUC(C), LEAK, DCI disentanglement, OIS and
annotator agreement."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from cqa._seeding import derive_seed
from cqa.datamodel import (
    ConceptMatrix,
    LabeledDataset,
    LabelVector,
    RelevanceMatrix,
    Vocabulary,
    as_labels,
    as_matrix,
)
from cqa.errors import DataError, NumericalError
from cqa.learners import SolverConfig, train_forest, train_linear_svm, train_logistic

log = logging.getLogger(__name__)


# ------------------------------------------------------------------ accuracy


def _binary_auc(scores: np.ndarray, truth: np.ndarray) -> float:
    pos = truth == 1
    n_pos = int(pos.sum())
    n_neg = len(truth) - n_pos
    ranks = rankdata(scores)  # average ranks, so ties count 1/2
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def concept_auc(predicted, truth):
    """Mean per-concept ROC-AUC (Mann-Whitney statistic).

    Returns ``(mean_auc, per_concept, skipped)`` where ``per_concept[j]`` is
    None for concepts whose truth column holds a single class; those are
    listed in ``skipped`` and left out of the mean.
    """
    P = as_matrix(predicted)
    if isinstance(truth, ConceptMatrix) and not truth.is_binary:
        raise DataError("concept_auc needs binary ground-truth concepts")
    T = as_matrix(truth)
    if P.shape != T.shape:
        raise DataError(f"predicted shape {P.shape} != truth shape {T.shape}")
    per: list[float | None] = []
    skipped: list[int] = []
    for j in range(T.shape[1]):
        col = T[:, j]
        if col.min() == col.max():
            per.append(None)
            skipped.append(j)
        else:
            per.append(_binary_auc(P[:, j], col))
    scored = [a for a in per if a is not None]
    if not scored:
        raise DataError("no scorable concepts: every truth column is single-class")
    return float(np.mean(scored)), per, skipped


def macro_f1(predicted, truth, m: int | None = None) -> float:
    """Positive-class F1 for two classes, unweighted macro-F1 otherwise.

    Per-class F1 with a zero denominator counts as 0.
    """
    yp, yt = as_labels(predicted), as_labels(truth)
    if yp.shape != yt.shape:
        raise DataError(f"length mismatch: {len(yp)} predictions vs {len(yt)} labels")
    if m is None:
        m = truth.m if isinstance(truth, LabelVector) else max(int(yt.max(initial=0)), int(yp.max(initial=0))) + 1
        m = max(m, 2)

    def f1(c):
        tp = np.sum((yp == c) & (yt == c))
        denom = np.sum(yp == c) + np.sum(yt == c)
        return 2.0 * tp / denom if denom else 0.0

    if m == 2:
        return float(f1(1))
    return float(np.mean([f1(c) for c in range(m)]))


# ------------------------------------------------------------------ leakage


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    den = math.sqrt(float(xc @ xc) * float(yc @ yc))
    return float(xc @ yc / den) if den > 0 else 0.0


def concept_label_correlations(truth_concepts, labels, m: int | None = None) -> list[float]:
    """Pearson r of each concept with the label.

    Two classes: signed r against the 0/1 label. More classes: the largest
    |r| against any one-hot class indicator. Constant columns give 0.
    """
    C = as_matrix(truth_concepts)
    y = as_labels(labels)
    if m is None:
        m = labels.m if isinstance(labels, LabelVector) else max(int(y.max()) + 1, 2)
    out = []
    for j in range(C.shape[1]):
        if m == 2:
            out.append(_pearson(C[:, j], y.astype(np.float64)))
        else:
            out.append(max(abs(_pearson(C[:, j], (y == c).astype(np.float64))) for c in range(m)))
    return out


@dataclass(frozen=True)
class GapCurve:
    gaps: tuple[float, ...]
    order: tuple[int, ...]
    f1_cbm: tuple[float, ...]
    f1_gt: tuple[float, ...]
    correlations: tuple[float, ...] = ()

    def __post_init__(self):
        k = len(self.order)
        if not (len(self.gaps) == len(self.f1_cbm) == len(self.f1_gt) == k):
            raise DataError("gap curve series must all have length k")
        if sorted(self.order) != list(range(k)):
            raise DataError("gap curve order must be a permutation of 0..k-1")

    @property
    def k(self) -> int:
        return len(self.order)


def leakage_order(correlations) -> list[int]:
    """Concept indices by ascending |r|, ties broken by index."""
    return sorted(range(len(correlations)), key=lambda j: (abs(correlations[j]), j))


def leak_gaps(ds: LabeledDataset, predicted, cfg: SolverConfig = SolverConfig(),
              jobs: int = 1) -> GapCurve:
    """Label-F1 gap between predicted and ground-truth concept prefixes.

    Concepts are ordered by ascending absolute ground-truth correlation with
    the label (measured on the train split). For each prefix length l a pair
    of linear SVMs is fit on the train split, one on the first l predicted
    columns and one on the first l ground-truth columns, and both are scored
    by :func:`macro_f1` on the test split.
    """
    P = as_matrix(predicted)
    if P.shape != (ds.n, ds.k):
        raise DataError(f"predicted concepts have shape {P.shape}, expected {(ds.n, ds.k)}")
    ds.require_splits("train", "test")
    tr, te = ds.mask("train"), ds.mask("test")
    C = ds.concepts.values
    y = ds.labels.values
    y_tr, y_te = y[tr], y[te]
    if len(np.unique(y_tr)) < 2:
        raise DataError("train split labels are single-class; LEAK needs both classes")
    corr = concept_label_correlations(C[tr], y_tr, ds.m)
    order = leakage_order(corr)

    def f1_at(source, ell):
        cols = order[:ell]
        model = train_linear_svm(source[tr][:, cols], y_tr, cfg, n_classes=ds.m)
        pred, _ = model.predict(source[te][:, cols])
        return macro_f1(pred, y_te, ds.m)

    tasks = [(src, ell) for ell in range(1, ds.k + 1) for src in (P, C)]
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            res = list(ex.map(lambda a: f1_at(*a), tasks))
    else:
        res = [f1_at(*a) for a in tasks]
    f1_cbm = tuple(res[0::2])
    f1_gt = tuple(res[1::2])
    gaps = tuple(a - b for a, b in zip(f1_cbm, f1_gt))
    return GapCurve(gaps, tuple(order), f1_cbm, f1_gt, tuple(corr))


def leak(curve: GapCurve) -> float:
    """Normalised mean positive gap; 1 is the maximum attainable leakage."""
    k = curve.k
    z = 1.0 - sum(curve.f1_gt) / k
    if z <= 1e-9:
        raise NumericalError(
            "LEAK undefined: zero headroom (ground-truth prefixes already reach F1=1)")
    raw = sum(max(g, 0.0) for g in curve.gaps) / (k * z)
    value = min(max(raw, 0.0), 1.0)
    if value != raw:
        log.info("LEAK clamped from %.6g to %.6g", raw, value)
    return value


# ------------------------------------------------------------------ relevance probes


def relevance_matrix(source, truth, cfg: SolverConfig = SolverConfig(), *,
                     seed_tag: str = "probe", jobs: int = 1) -> RelevanceMatrix:
    """Forest importances of each source column for each ground-truth concept.

    Forest ``j`` is seeded from ``(cfg.seed, seed_tag, j)`` and draws
    ``cfg.probe_feature_fraction`` candidates per split; it never depends on
    the source column order.
    """
    S = as_matrix(source)
    T = as_matrix(truth)
    if S.shape[0] != T.shape[0]:
        raise DataError(f"row mismatch: source has {S.shape[0]} rows, truth {T.shape[0]}")
    if S.shape[1] != T.shape[1]:
        raise DataError("source and truth must have the same number of concepts")
    k = T.shape[1]
    pcfg = cfg.probe()

    def column(j):
        seed = derive_seed(cfg.seed, seed_tag, j)
        return train_forest(S, T[:, j].astype(np.int64), pcfg, seed=seed).importances

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            cols = list(ex.map(column, range(k)))
    else:
        cols = [column(j) for j in range(k)]
    return RelevanceMatrix(np.column_stack(cols))


@dataclass(frozen=True)
class DciResult:
    per_concept_d: tuple[float, ...]
    weights: tuple[float, ...]
    dis: float
    relevance: RelevanceMatrix


def dci_from_relevance(relevance) -> DciResult:
    """Disentanglement from a relevance matrix (rows = learned concepts).

    Rows that no probe uses get D_i = 0 and weight 0.
    """
    R = relevance if isinstance(relevance, RelevanceMatrix) else RelevanceMatrix(relevance)
    E = np.asarray(R.entries)
    k = E.shape[0]
    if k < 2:
        raise DataError("DCI needs k >= 2 (entropy uses log base k)")
    row_sums = E.sum(axis=1)
    total = row_sums.sum()
    d = np.zeros(k)
    for i in range(k):
        if row_sums[i] <= 0:
            continue
        p = E[i] / row_sums[i]
        nz = p[p > 0]
        h = float(-(nz * np.log(nz)).sum() / math.log(k))
        d[i] = min(max(1.0 - h, 0.0), 1.0)
    if total <= 0:
        log.warning("relevance matrix is all zero; disentanglement set to 0")
        rho = np.zeros(k)
    else:
        rho = row_sums / total
    dis = float(np.dot(rho, d))
    return DciResult(tuple(d.tolist()), tuple(rho.tolist()), min(max(dis, 0.0), 1.0), R)


def dci(predicted, truth, cfg: SolverConfig = SolverConfig(), *, relevance=None,
        jobs: int = 1) -> DciResult:
    """DCI disentanglement of predicted concepts w.r.t. binary ground truth.

    ``relevance`` bypasses the forest probes (useful when the matrix has
    already been computed, or for tests).
    """
    if isinstance(truth, ConceptMatrix) and not truth.is_binary:
        raise DataError("dci needs binary ground-truth concepts")
    if as_matrix(truth).shape[1] < 2:
        raise DataError("DCI needs k >= 2 (entropy uses log base k)")
    if relevance is None:
        relevance = relevance_matrix(predicted, truth, cfg, jobs=jobs)
    return dci_from_relevance(relevance)


def ois_from_relevance(r_learned, r_gt) -> float:
    """(2/k) * sum over all k^2 cells of squared relevance differences."""
    A = as_matrix(r_learned.entries if isinstance(r_learned, RelevanceMatrix) else r_learned)
    B = as_matrix(r_gt.entries if isinstance(r_gt, RelevanceMatrix) else r_gt)
    if A.shape != B.shape:
        raise DataError(f"relevance shapes differ: {A.shape} vs {B.shape}")
    k = A.shape[0]
    return float(2.0 / k * np.sum((A - B) ** 2))


def ois(predicted, truth, cfg: SolverConfig = SolverConfig(), *, r_learned=None,
        independent_gt_seed: bool = False, jobs: int = 1):
    """Oracle impurity score; returns ``(ois, r_learned, r_gt)``.

    The oracle matrix probes ground truth with itself. By default both probe
    passes share per-target seeds so identical inputs give exactly 0;
    ``independent_gt_seed`` draws the oracle forests from a separate stream.
    The value is the raw formula and may exceed 1.
    """
    if isinstance(truth, ConceptMatrix) and not truth.is_binary:
        raise DataError("ois needs binary ground-truth concepts")
    if as_matrix(truth).shape[1] < 2:
        raise DataError("OIS needs k >= 2")
    if r_learned is None:
        r_learned = relevance_matrix(predicted, truth, cfg, jobs=jobs)
    tag = "gt" if independent_gt_seed else "probe"
    r_gt = relevance_matrix(truth, truth, cfg, seed_tag=tag, jobs=jobs)
    return ois_from_relevance(r_learned, r_gt), r_learned, r_gt


# ------------------------------------------------------------------ annotator agreement


@dataclass(frozen=True)
class AgreementResult:
    macro_precision: float
    macro_recall: float
    per_concept: tuple[tuple[float | None, float | None, int], ...]
    binarized: ConceptMatrix | None = field(default=None, repr=False)

    @property
    def excluded(self) -> dict[str, list[int]]:
        return {
            "precision": [j for j, (p, _, _) in enumerate(self.per_concept) if p is None],
            "recall": [j for j, (_, r, _) in enumerate(self.per_concept) if r is None],
        }

    def to_json(self) -> dict:
        return {
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "per_concept": [
                {"precision": p, "recall": r, "support": s} for p, r, s in self.per_concept
            ],
            "excluded": self.excluded,
        }


def binarize_scores(scores, truth, vocab: Vocabulary | None, cfg: SolverConfig = SolverConfig(),
                    fit_mask=None) -> np.ndarray:
    """Turn annotator scores into 0/1 annotations.

    Mutually exclusive groups keep only their highest-scoring member per row
    (ties to the lowest index); every other concept is thresholded at
    probability 0.5 by a per-concept logistic fit of truth on score over the
    ``fit_mask`` rows.
    """
    S = as_matrix(scores)
    T = as_matrix(truth)
    n, k = S.shape
    fit = np.ones(n, dtype=bool) if fit_mask is None else np.asarray(fit_mask, dtype=bool)
    out = np.zeros((n, k))
    groups = vocab.groups if vocab is not None else ()
    grouped = set()
    for g in groups:
        g = list(g)
        grouped.update(g)
        best = np.argmax(S[:, g], axis=1)
        out[np.arange(n), np.asarray(g)[best]] = 1.0
    for j in range(k):
        if j in grouped:
            continue
        t = T[fit, j].astype(np.int64)
        if t.min() == t.max():
            out[:, j] = float(t[0])
            continue
        model = train_logistic(S[fit, j:j + 1], t, l2=0.0, seed=derive_seed(cfg.seed, "agree", j))
        out[:, j] = model.predict(S[:, j:j + 1])[0]
    return out


def annotation_agreement(annotations, truth, vocab: Vocabulary | None = None,
                         cfg: SolverConfig = SolverConfig(), fit_mask=None) -> AgreementResult:
    """Macro precision/recall of annotations against ground-truth concepts.

    Concepts with undefined precision (nothing annotated positive) or
    undefined recall (no true positives to find) are reported with None and
    left out of the corresponding macro average.
    """
    A = as_matrix(annotations)
    T = as_matrix(truth)
    if A.shape != T.shape:
        raise DataError(f"annotation shape {A.shape} != truth shape {T.shape}")
    is_binary = annotations.is_binary if isinstance(annotations, ConceptMatrix) \
        else bool(np.all((A == 0) | (A == 1)))
    B = A if is_binary else binarize_scores(A, T, vocab, cfg, fit_mask)
    per = []
    for j in range(T.shape[1]):
        a, t = B[:, j] == 1, T[:, j] == 1
        tp = int(np.sum(a & t))
        n_pred, support = int(a.sum()), int(t.sum())
        per.append((tp / n_pred if n_pred else None, tp / support if support else None, support))
    precs = [p for p, _, _ in per if p is not None]
    recs = [r for _, r, _ in per if r is not None]
    return AgreementResult(
        float(np.mean(precs)) if precs else float("nan"),
        float(np.mean(recs)) if recs else float("nan"),
        tuple(per),
        ConceptMatrix.binary(B),
    )
