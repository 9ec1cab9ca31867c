"""Sequential concept-bottleneck trainer.

Stage A fits one linear head per concept on the features (logistic for binary
supervision, ridge for annotator scores). Stage B freezes those heads and fits
a sparse multinomial layer on their outputs.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from cqa._seeding import derive_seed
from cqa.datamodel import (
    ConceptMatrix,
    LabeledDataset,
    LabelVector,
    as_matrix,
    atomic_write_text,
)
from cqa.errors import ConfigError, DataError
from cqa.learners import LinearModel, SolverConfig, train_elastic_net_linear, train_logistic
from cqa.synth import AnnotatorSpec, simulate_annotator

log = logging.getLogger(__name__)

MODEL_MAGIC = "#cqa-model v1"
MODES = ("label_supervised", "score_supervised")
INFERENCE_INPUTS = ("logits", "probs")


@dataclass(frozen=True)
class TrainConfig:
    concept_l2: float = 0.1
    balanced: bool = True
    solver: SolverConfig = field(default_factory=SolverConfig)
    supervision: str | AnnotatorSpec = "ground_truth"
    inference_input: str = "logits"

    def __post_init__(self):
        if not (self.concept_l2 >= 0 and math.isfinite(self.concept_l2)):
            raise ConfigError("concept_l2 must be a finite non-negative number")
        if not isinstance(self.supervision, AnnotatorSpec) and self.supervision != "ground_truth":
            raise ConfigError("supervision must be 'ground_truth' or an annotator spec")
        if self.inference_input not in INFERENCE_INPUTS:
            raise ConfigError(f"inference_input must be one of {INFERENCE_INPUTS}")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**self.__dict__, **changes})

    def to_json(self) -> dict:
        sup = self.supervision
        return {
            "concept_l2": self.concept_l2, "balanced": self.balanced,
            "inference_input": self.inference_input,
            "supervision": sup.to_json() if isinstance(sup, AnnotatorSpec) else sup,
        }

    @classmethod
    def from_json(cls, obj, solver: SolverConfig | None = None) -> "TrainConfig":
        allowed = {"concept_l2", "balanced", "inference_input", "supervision"}
        if not isinstance(obj, dict):
            raise ConfigError("train config must be a JSON object")
        unknown = sorted(set(obj) - allowed)
        if unknown:
            raise ConfigError(f"unknown key {unknown[0]!r} in train config")
        sup = obj.get("supervision", "ground_truth")
        if isinstance(sup, dict):
            sup = AnnotatorSpec.from_json(sup)
        return cls(concept_l2=float(obj.get("concept_l2", 0.1)),
                   balanced=bool(obj.get("balanced", True)),
                   solver=solver or SolverConfig(), supervision=sup,
                   inference_input=obj.get("inference_input", "logits"))


@dataclass(frozen=True)
class CbmModel:
    extractor: tuple[LinearModel, ...]
    inference: LinearModel
    mode: str = "label_supervised"
    inference_input: str = "logits"
    concept_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.mode not in MODES:
            raise DataError(f"unknown CBM mode {self.mode!r}")
        if self.inference_input not in INFERENCE_INPUTS:
            raise DataError(f"unknown inference input {self.inference_input!r}")
        if not self.extractor:
            raise DataError("extractor must have at least one concept head")
        widths = {h.n_features for h in self.extractor}
        if len(widths) != 1:
            raise DataError("extractor heads disagree on feature width")
        if self.inference.n_features != len(self.extractor):
            raise DataError(
                f"inference layer expects {self.inference.n_features} concepts, "
                f"extractor has {len(self.extractor)}")

    @property
    def k(self) -> int:
        return len(self.extractor)

    @property
    def d(self) -> int:
        return self.extractor[0].n_features

    @property
    def n_classes(self) -> int:
        return self.inference.n_classes

    def extractor_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        W = np.vstack([h.weights for h in self.extractor])
        b = np.concatenate([h.bias for h in self.extractor])
        return W, b


def _constant_head(d: int, prior: float) -> LinearModel:
    return LinearModel(np.zeros((1, d)), np.array([math.log(prior / (1.0 - prior))]), 2,
                       {"kind": "constant"})


def _ridge_head(X: np.ndarray, s: np.ndarray, l2: float) -> LinearModel:
    xm, sm = X.mean(axis=0), s.mean()
    Xc = X - xm
    A = Xc.T @ Xc + max(l2, 1e-12) * len(s) * np.eye(X.shape[1])
    w = np.linalg.solve(A, Xc.T @ (s - sm))
    return LinearModel(w[None, :], np.array([sm - xm @ w]), 2, {"kind": "ridge", "l2": l2})


def _fit_head(X, target, binary, cfg: TrainConfig, j: int, name: str) -> LinearModel:
    if not binary:
        return _ridge_head(X, target, cfg.concept_l2)
    t = target.astype(np.int64)
    pos = int(t.sum())
    if pos in (0, len(t)):
        prior = (pos + 0.5) / (len(t) + 1.0)
        log.warning("concept %d (%s) has a single supervised class; using constant logit %.4g",
                    j, name, math.log(prior / (1 - prior)))
        return _constant_head(X.shape[1], prior)
    return train_logistic(X, t, l2=cfg.concept_l2, balanced=cfg.balanced,
                          seed=derive_seed(cfg.solver.seed, "extractor", j))


def concept_supervision(ds: LabeledDataset, cfg: TrainConfig) -> ConceptMatrix:
    if isinstance(cfg.supervision, AnnotatorSpec):
        return simulate_annotator(ds, cfg.supervision)
    return ds.concepts


def train_extractor(ds: LabeledDataset, supervision: ConceptMatrix, cfg: TrainConfig,
                    jobs: int = 1) -> tuple[LinearModel, ...]:
    if supervision.n != ds.n or supervision.k != ds.k:
        raise DataError(f"supervision shape {supervision.values.shape} does not match "
                        f"dataset ({ds.n}, {ds.k})")
    tr = ds.mask("train")
    X = np.asarray(ds.features)[tr]
    S = supervision.values[tr]
    names = ds.vocabulary.names

    def fit(j):
        return _fit_head(X, S[:, j], supervision.is_binary, cfg, j, names[j])

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            return tuple(ex.map(fit, range(ds.k)))
    return tuple(fit(j) for j in range(ds.k))


def _bottleneck(extractor, X, inference_input) -> np.ndarray:
    W = np.vstack([h.weights for h in extractor])
    b = np.concatenate([h.bias for h in extractor])
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != W.shape[1]:
        raise DataError(f"expected {W.shape[1]} features, got shape {X.shape}")
    Z = X @ W.T + b
    return expit(Z) if inference_input == "probs" else Z


def train_inference(ds: LabeledDataset, extractor, cfg: TrainConfig) -> LinearModel:
    tr = ds.mask("train")
    Z = _bottleneck(extractor, np.asarray(ds.features)[tr], cfg.inference_input)
    return train_elastic_net_linear(Z, ds.labels.values[tr], cfg.solver, n_classes=ds.m)


def train_cbm(ds: LabeledDataset, cfg: TrainConfig = TrainConfig(),
              supervision: ConceptMatrix | None = None, jobs: int = 1) -> CbmModel:
    """Sequential training on the train split.

    ``supervision`` overrides ``cfg.supervision`` with precomputed concept
    annotations covering every row of ``ds``.
    """
    ds.require_splits("train")
    sup = supervision if supervision is not None else concept_supervision(ds, cfg)
    extractor = train_extractor(ds, sup, cfg, jobs)
    inference = train_inference(ds, extractor, cfg)
    mode = "label_supervised" if sup.is_binary else "score_supervised"
    return CbmModel(extractor, inference, mode, cfg.inference_input, tuple(ds.vocabulary.names))


def predict_concepts(model: CbmModel, X) -> ConceptMatrix:
    """Concept logits (or affine scores in score-supervised mode)."""
    return ConceptMatrix.scores(_bottleneck(model.extractor, X, "logits"))


def predict_labels(model: CbmModel, X) -> tuple[LabelVector, np.ndarray]:
    Z = _bottleneck(model.extractor, X, model.inference_input)
    labels, scores = model.inference.predict(Z)
    return LabelVector(labels, max(model.n_classes, 2)), scores


def explain(model: CbmModel, x, class_id: int) -> list[tuple[int, float]]:
    """Per-concept contributions to one class score, largest magnitude first.

    The contributions plus the class bias equal the class score.
    """
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    W = model.inference.weights
    if W.shape[0] == 1:
        # single-row binary layer: class 1 scores +w, class 0 scores 0
        rows = {1: W[0], 0: np.zeros_like(W[0])}
    else:
        rows = dict(enumerate(W))
    if class_id not in rows:
        raise DataError(f"class id {class_id} outside [0, {model.n_classes})")
    z = _bottleneck(model.extractor, x, model.inference_input)[0]
    contrib = rows[class_id] * z
    order = sorted(range(len(contrib)), key=lambda j: (-abs(contrib[j]), j))
    return [(j, float(contrib[j])) for j in order]


def class_bias(model: CbmModel, class_id: int) -> float:
    b = model.inference.bias
    if len(b) == 1:
        return float(b[0]) if class_id == 1 else 0.0
    return float(b[class_id])


# ------------------------------------------------------------------ serialization


def _linear_json(m: LinearModel) -> dict:
    return {"weights": m.weights.tolist(), "bias": m.bias.tolist(),
            "n_classes": m.n_classes, "regularization": m.regularization}


def _linear_from(obj) -> LinearModel:
    return LinearModel(np.asarray(obj["weights"], dtype=np.float64),
                       np.asarray(obj["bias"], dtype=np.float64),
                       int(obj["n_classes"]), dict(obj.get("regularization", {})))


def dumps_model(model: CbmModel) -> str:
    body = {
        "mode": model.mode, "inference_input": model.inference_input,
        "concept_names": list(model.concept_names),
        "extractor": [_linear_json(h) for h in model.extractor],
        "inference": _linear_json(model.inference),
    }
    # json writes floats with repr(), which round-trips float64 exactly
    return MODEL_MAGIC + "\n" + json.dumps(body, sort_keys=True) + "\n"


def save_model(model: CbmModel, path) -> None:
    atomic_write_text(path, dumps_model(model))


def loads_model(text: str, path="<string>") -> CbmModel:
    head, _, rest = text.partition("\n")
    if head.strip() != MODEL_MAGIC:
        raise DataError(f"{path}:1: expected header {MODEL_MAGIC!r}, got {head[:40]!r}")
    try:
        body = json.loads(rest)
        return CbmModel(tuple(_linear_from(h) for h in body["extractor"]),
                        _linear_from(body["inference"]), body["mode"], body["inference_input"],
                        tuple(body.get("concept_names", ())))
    except (ValueError, KeyError, TypeError) as e:
        raise DataError(f"{path}: malformed model body: {e}") from None


def load_model(path) -> CbmModel:
    with open(path, encoding="utf-8") as fh:
        return loads_model(fh.read(), path)
