"""Evaluation reports: assembly, seed aggregation, JSON and CSV export."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from cqa.datamodel import (
    EvalReport,
    LabeledDataset,
    RelevanceMatrix,
    as_labels,
    as_matrix,
    atomic_write_text,
    fmt_float,
)
from cqa.errors import CqaError, DataError
from cqa.learners import SolverConfig
from cqa import metrics

log = logging.getLogger(__name__)

REPORT_SCHEMA = "#cqa-report v1"
AGGREGATE_SCHEMA = "#cqa-aggregate v1"
# metadata keys that may differ between otherwise identical runs
VOLATILE_KEYS = ("timestamps",)


def config_digest(obj) -> str:
    """sha256 of the canonical JSON form, volatile keys dropped."""
    if isinstance(obj, dict):
        obj = {k: v for k, v in obj.items() if k not in VOLATILE_KEYS}
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _with_context(step: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except CqaError as e:
        raise type(e)(f"{step}: {e}") from e


def evaluate_model(ds: LabeledDataset, predicted_concepts, predicted_labels,
                   cfg: SolverConfig = SolverConfig(), *, model_name: str = "model",
                   metadata: dict | None = None, jobs: int = 1) -> EvalReport:
    """Compute every report metric for one trained model.

    ``predicted_concepts`` covers all ``ds.n`` rows because LEAK fits its
    probes on the train split. ``predicted_labels`` may cover all rows or
    only the test rows. Everything else is scored on the test split, and
    ``cfg.seed`` drives every stochastic step.
    """
    ds.require_splits("train", "test")
    te = ds.mask("test")
    P = as_matrix(predicted_concepts)
    if P.shape != (ds.n, ds.k):
        raise DataError(f"predicted concepts have shape {P.shape}, expected {(ds.n, ds.k)}")
    yhat = as_labels(predicted_labels)
    if len(yhat) == ds.n:
        yhat = yhat[te]
    elif len(yhat) != int(te.sum()):
        raise DataError(f"predicted labels have {len(yhat)} rows; expected {ds.n} "
                        f"or the {int(te.sum())} test rows")
    C_te = ds.concepts.values[te]
    P_te = P[te]

    f1 = _with_context("F1(Y)", metrics.macro_f1, yhat, ds.labels.values[te], ds.m)
    auc, per_auc, skipped = _with_context("AUC(C)", metrics.concept_auc, P_te, C_te)
    curve = _with_context("LEAK", metrics.leak_gaps, ds, P, cfg, jobs=jobs)
    leak_value = _with_context("LEAK", metrics.leak, curve)
    dres = _with_context("DCI", metrics.dci, P_te, C_te, cfg, jobs=jobs)
    ois_value, r_learned, r_gt = _with_context(
        "OIS", metrics.ois, P_te, C_te, cfg, r_learned=dres.relevance, jobs=jobs)

    meta = {"model": model_name, "seed": int(cfg.seed), "solver": cfg.to_json()}
    meta.update(metadata or {})
    return EvalReport(
        f1_y=float(f1), auc_c=float(auc), leak=float(leak_value), dis=float(dres.dis),
        ois=float(ois_value), gap_curve=tuple(curve.gaps),
        relevance_learned=r_learned, relevance_gt=r_gt,
        skipped_concepts=tuple(skipped), gap_order=tuple(curve.order),
        f1_cbm=tuple(curve.f1_cbm), f1_gt=tuple(curve.f1_gt),
        per_concept_auc=tuple(per_auc), per_concept_d=tuple(dres.per_concept_d),
        concept_names=tuple(ds.vocabulary.names), metadata=meta)


# ------------------------------------------------------------------ JSON


def _relevance_json(r: RelevanceMatrix) -> dict:
    return {"entries": r.entries.tolist(), "degenerate_targets": list(r.degenerate_targets)}


def _relevance_from(obj) -> RelevanceMatrix:
    return RelevanceMatrix(np.asarray(obj["entries"], dtype=np.float64),
                           tuple(obj.get("degenerate_targets", ())))


def report_to_json(r: EvalReport) -> dict:
    return {
        "schema": REPORT_SCHEMA,
        **r.metric_row(),
        "gap_curve": list(r.gap_curve),
        "gap_order": list(r.gap_order),
        "f1_cbm": list(r.f1_cbm),
        "f1_gt": list(r.f1_gt),
        "per_concept_auc": list(r.per_concept_auc),
        "per_concept_d": list(r.per_concept_d),
        "skipped_concepts": list(r.skipped_concepts),
        "concept_names": list(r.concept_names),
        "relevance_learned": _relevance_json(r.relevance_learned),
        "relevance_gt": _relevance_json(r.relevance_gt),
        "metadata": r.metadata,
    }


def report_from_json(obj) -> EvalReport:
    if not isinstance(obj, dict) or obj.get("schema") != REPORT_SCHEMA:
        raise DataError(f"not a report: expected schema {REPORT_SCHEMA!r}")
    try:
        return EvalReport(
            f1_y=obj["f1_y"], auc_c=obj["auc_c"], leak=obj["leak"], dis=obj["dis"],
            ois=obj["ois"], gap_curve=tuple(obj["gap_curve"]),
            relevance_learned=_relevance_from(obj["relevance_learned"]),
            relevance_gt=_relevance_from(obj["relevance_gt"]),
            skipped_concepts=tuple(obj.get("skipped_concepts", ())),
            gap_order=tuple(obj.get("gap_order", ())),
            f1_cbm=tuple(obj.get("f1_cbm", ())), f1_gt=tuple(obj.get("f1_gt", ())),
            per_concept_auc=tuple(obj.get("per_concept_auc", ())),
            per_concept_d=tuple(obj.get("per_concept_d", ())),
            concept_names=tuple(obj.get("concept_names", ())),
            metadata=dict(obj.get("metadata", {})))
    except (KeyError, TypeError) as e:
        raise DataError(f"malformed report: {e}") from None


def _dumps(obj) -> str:
    # repr floats round-trip float64 exactly
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def dumps_report(r: EvalReport) -> str:
    return _dumps(report_to_json(r))


def loads_report(text: str) -> EvalReport:
    try:
        return report_from_json(json.loads(text))
    except ValueError as e:
        if isinstance(e, DataError):
            raise
        raise DataError(f"report is not valid JSON: {e}") from None


def save_report(r: EvalReport, path) -> None:
    atomic_write_text(path, dumps_report(r))


def load_report(path) -> EvalReport:
    with open(path, encoding="utf-8") as fh:
        return loads_report(fh.read())


# ------------------------------------------------------------------ aggregation


@dataclass(frozen=True)
class AggregateReport:
    mean: dict
    std: dict
    n_runs: int
    runs: tuple[EvalReport, ...]

    def to_json(self) -> dict:
        return {"schema": AGGREGATE_SCHEMA, "n_runs": self.n_runs, "mean": self.mean,
                "std": self.std, "runs": [report_to_json(r) for r in self.runs]}

    @classmethod
    def from_json(cls, obj) -> "AggregateReport":
        if not isinstance(obj, dict) or obj.get("schema") != AGGREGATE_SCHEMA:
            raise DataError(f"not an aggregate: expected schema {AGGREGATE_SCHEMA!r}")
        return aggregate([report_from_json(r) for r in obj["runs"]])

    def table_row(self) -> str:
        return "  ".join(f"{m}={self.mean[m]:.3f}±{self.std[m]:.3f}" for m in EvalReport.METRICS)


def aggregate(reports) -> AggregateReport:
    """Per-metric mean and sample standard deviation (0 for one run)."""
    runs = tuple(reports)
    if not runs:
        raise DataError("aggregate needs at least one report")
    mean, std = {}, {}
    for m in EvalReport.METRICS:
        # sorted so the float sums do not depend on run order
        v = np.sort(np.array([getattr(r, m) for r in runs], dtype=np.float64))
        mu = math.fsum(v) / len(v)
        mean[m] = mu
        std[m] = math.sqrt(math.fsum((v - mu) ** 2) / (len(v) - 1)) if len(v) > 1 else 0.0
    return AggregateReport(mean, std, len(runs), runs)


def dumps_aggregate(agg: AggregateReport) -> str:
    return _dumps(agg.to_json())


def save_aggregate(agg: AggregateReport, path) -> None:
    atomic_write_text(path, dumps_aggregate(agg))


def load_aggregate(path) -> AggregateReport:
    with open(path, encoding="utf-8") as fh:
        return AggregateReport.from_json(json.load(fh))


# ------------------------------------------------------------------ CSV export

GAP_COLUMNS = ("model", "ell", "concept_name", "gap", "f1_cbm", "f1_gt")


def _name(r: EvalReport, j: int) -> str:
    return r.concept_names[j] if j < len(r.concept_names) else f"c{j}"


def dumps_gap_curves(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(GAP_COLUMNS)
    for r in reports:
        if len(r.gap_order) != len(r.gap_curve):
            raise DataError("report lacks the correlation order needed for gap export")
        for ell, (j, gap) in enumerate(zip(r.gap_order, r.gap_curve), start=1):
            w.writerow([r.model_name, ell, _name(r, j), fmt_float(gap),
                        fmt_float(r.f1_cbm[ell - 1]), fmt_float(r.f1_gt[ell - 1])])
    return buf.getvalue()


def export_gap_curves(reports, path) -> None:
    """One row per (model, prefix length); the concept is the one added at that length."""
    atomic_write_text(path, dumps_gap_curves(reports))


def dumps_relevance(r: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    k = r.relevance_learned.k
    names = [_name(r, j) for j in range(k)]
    w.writerow(["matrix", "source", *names])
    for label, R in (("learned", r.relevance_learned), ("ground_truth", r.relevance_gt)):
        for i in range(k):
            w.writerow([label, names[i], *(fmt_float(v) for v in R.entries[i])])
    return buf.getvalue()


def export_relevance_heatmaps(r: EvalReport, path) -> None:
    """Both k x k matrices; rows are source concepts, columns targets."""
    atomic_write_text(path, dumps_relevance(r))


def read_relevance_csv(path) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    out: dict[str, list] = {}
    for row in rows[1:]:
        out.setdefault(row[0], []).append([float(v) for v in row[2:]])
    return {k: np.array(v) for k, v in out.items()}
