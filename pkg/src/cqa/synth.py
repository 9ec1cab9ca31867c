"""Synthetic factor worlds, simulated annotators and concept entanglement."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from cqa._seeding import rng
from cqa.datamodel import (
    ConceptMatrix,
    LabeledDataset,
    LabelVector,
    Vocabulary,
    as_matrix,
)
from cqa.errors import ConfigError, DataError

SPLIT_FRACTIONS = (0.7, 0.1, 0.2)

HUES = ("red", "orange", "yellow", "chartreuse", "green", "cyan", "azure", "blue",
        "purple", "magenta")
SHAPES = ("pill", "cube", "cylinder", "sphere")


# ------------------------------------------------------------------ world


@dataclass(frozen=True)
class LabelRule:
    """How y is computed from ground-truth concepts.

    ``all``: y = 1 iff every listed concept is active (binary).
    ``any``: y = 1 iff at least one listed concept is active (binary).
    ``group``: y = position of the active member of the listed one-hot group.
    """

    kind: str
    concepts: tuple[int, ...]

    def __post_init__(self):
        if self.kind not in ("all", "any", "group"):
            raise ConfigError(f"unknown label rule kind {self.kind!r}")
        if not self.concepts:
            raise ConfigError("label rule needs at least one concept")
        object.__setattr__(self, "concepts", tuple(int(c) for c in self.concepts))

    @property
    def m(self) -> int:
        return len(self.concepts) if self.kind == "group" else 2

    def apply(self, C: np.ndarray) -> np.ndarray:
        sub = C[:, list(self.concepts)]
        if self.kind == "all":
            return np.all(sub == 1, axis=1).astype(np.int64)
        if self.kind == "any":
            return np.any(sub == 1, axis=1).astype(np.int64)
        return np.argmax(sub, axis=1).astype(np.int64)

    def to_json(self) -> dict:
        return {"kind": self.kind, "concepts": list(self.concepts)}

    @classmethod
    def from_json(cls, obj) -> "LabelRule":
        _check_keys(obj, {"kind", "concepts"}, "label_rule")
        return cls(obj["kind"], tuple(obj["concepts"]))


@dataclass(frozen=True)
class WorldSpec:
    k: int
    groups: tuple[tuple[int, ...], ...]
    d: int
    n: int
    label_rule: LabelRule
    feature_noise: float = 0.0
    singleton_prevalence: float = 0.5
    names: tuple[str, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.k < 1 or self.d < 1 or self.n < 1:
            raise ConfigError("k, d and n must be positive")
        groups = tuple(tuple(int(i) for i in g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        if sum(len(g) for g in groups) > self.k:
            raise ConfigError("group sizes exceed k")
        seen: set[int] = set()
        for g in groups:
            if len(g) < 2:
                raise ConfigError(f"group {list(g)} must have at least two members")
            for i in g:
                if not 0 <= i < self.k:
                    raise ConfigError(f"group index {i} out of range for k={self.k}")
                if i in seen:
                    raise ConfigError(f"concept {i} appears in two groups")
                seen.add(i)
        for c in self.label_rule.concepts:
            if not 0 <= c < self.k:
                raise ConfigError(f"label rule references concept {c}, k={self.k}")
        if self.label_rule.kind == "group" and self.label_rule.concepts not in groups:
            raise ConfigError("a 'group' label rule must list one of the declared groups")
        if self.feature_noise < 0:
            raise ConfigError("feature_noise must be >= 0")
        if not 0.0 <= self.singleton_prevalence <= 1.0:
            raise ConfigError("singleton_prevalence must be in [0, 1]")
        if self.names and len(self.names) != self.k:
            raise ConfigError(f"{len(self.names)} names given for k={self.k}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def vocabulary(self) -> Vocabulary:
        names = self.names or tuple(f"concept_{i}" for i in range(self.k))
        return Vocabulary(tuple(names), self.groups)

    def replace(self, **changes) -> "WorldSpec":
        return WorldSpec(**{**self.__dict__, **changes})

    def to_json(self) -> dict:
        out = {
            "k": self.k, "groups": [list(g) for g in self.groups], "d": self.d, "n": self.n,
            "label_rule": self.label_rule.to_json(), "feature_noise": self.feature_noise,
            "singleton_prevalence": self.singleton_prevalence, "seed": self.seed,
        }
        if self.names:
            out["names"] = list(self.names)
        return out

    @classmethod
    def from_json(cls, obj) -> "WorldSpec":
        _check_keys(obj, {"k", "groups", "d", "n", "label_rule", "feature_noise",
                          "singleton_prevalence", "names", "seed"}, "world")
        try:
            return cls(
                k=int(obj["k"]), groups=tuple(tuple(g) for g in obj.get("groups", ())),
                d=int(obj["d"]), n=int(obj["n"]),
                label_rule=LabelRule.from_json(obj["label_rule"]),
                feature_noise=float(obj.get("feature_noise", 0.0)),
                singleton_prevalence=float(obj.get("singleton_prevalence", 0.5)),
                names=tuple(obj.get("names", ())), seed=int(obj.get("seed", 0)),
            )
        except KeyError as e:
            raise ConfigError(f"world config missing key {e.args[0]!r}") from None


def shapes3d_like(n: int = 5000, d: int = 64, feature_noise: float = 0.0, seed: int = 0) -> WorldSpec:
    """Floor, wall and object hue (10 each), scale (8) and shape (4); y = red pill."""
    names = ([f"floor_{h}" for h in HUES] + [f"wall_{h}" for h in HUES]
             + [f"object_{h}" for h in HUES] + [f"scale_{i}" for i in range(8)]
             + [f"shape_{s}" for s in SHAPES])
    groups = (tuple(range(0, 10)), tuple(range(10, 20)), tuple(range(20, 30)),
              tuple(range(30, 38)), tuple(range(38, 42)))
    return WorldSpec(k=42, groups=groups, d=d, n=n, label_rule=LabelRule("all", (20, 38)),
                     feature_noise=feature_noise, names=tuple(names), seed=seed)


def attribute_world(k: int = 42, n: int = 5000, d: int = 64, feature_noise: float = 0.0,
                    seed: int = 0) -> WorldSpec:
    """k independent binary attributes at prevalence 0.5; y = attr_0 AND attr_1."""
    return WorldSpec(k=k, groups=(), d=d, n=n, label_rule=LabelRule("all", (0, 1)),
                     feature_noise=feature_noise,
                     names=tuple(f"attr_{i}" for i in range(k)), seed=seed)


def split_tags(n: int, seed: int) -> np.ndarray:
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    if n_train < 1 or n_val < 1 or n - n_train - n_val < 1:
        raise ConfigError(f"n={n} too small for non-empty 70/10/20 splits")
    tags = np.empty(n, dtype=object)
    perm = rng(seed, "split").permutation(n)
    tags[perm[:n_train]] = "train"
    tags[perm[n_train:n_train + n_val]] = "val"
    tags[perm[n_train + n_val:]] = "test"
    return tags


def embedding(spec: WorldSpec) -> np.ndarray:
    """The fixed d x k concept-to-feature map of a world.

    Columns are orthonormal when d >= k (a random rotation of the concept
    axes), so a linear probe can read each concept without picking up others.
    """
    G = rng(spec.seed, "embedding").normal(size=(spec.d, spec.k))
    if spec.d < spec.k:
        return G / math.sqrt(spec.d)
    Q, R = np.linalg.qr(G)
    return Q * np.sign(np.diag(R))


def generate_world(spec: WorldSpec) -> LabeledDataset:
    """Sample concepts, labels and features ``X = E c + noise`` for a world."""
    g = rng(spec.seed, "concepts")
    C = np.zeros((spec.n, spec.k))
    grouped = set()
    for grp in spec.groups:
        grouped.update(grp)
        pick = g.integers(0, len(grp), size=spec.n)
        C[np.arange(spec.n), np.asarray(grp)[pick]] = 1.0
    singles = [j for j in range(spec.k) if j not in grouped]
    if singles:
        C[:, singles] = (g.random((spec.n, len(singles))) < spec.singleton_prevalence)
    y = spec.label_rule.apply(C)
    present = np.unique(y)
    if len(present) < 2:
        raise DataError(
            f"label rule produced only class {present.tolist()} on n={spec.n} rows; "
            "change the rule or increase n")
    X = C @ embedding(spec).T
    if spec.feature_noise > 0:
        X = X + rng(spec.seed, "noise").normal(scale=spec.feature_noise, size=X.shape)
    return LabeledDataset(
        features=X, concepts=ConceptMatrix.binary(C),
        labels=LabelVector(y, spec.label_rule.m), vocabulary=spec.vocabulary(),
        split=tuple(split_tags(spec.n, spec.seed)))


# ------------------------------------------------------------------ annotators


ANNOTATOR_MODES = ("flip", "score", "leak")


@dataclass(frozen=True)
class AnnotatorSpec:
    """Simulated concept annotator.

    ``flip``: binary answers; each truth bit flips independently with the
    per-concept false-positive / false-negative rate. Setting
    ``target_precision`` and ``target_recall`` instead derives the rates per
    concept from the dataset's prevalences via :func:`calibrate_flip_rates`.
    ``score``: continuous ``signal * (2c - 1) + N(0, noise_std^2)``.
    ``leak``: exact ground truth; only useful together with ``leak_beta``.

    ``leak_beta > 0`` pushes the ``leak_concept`` channel (default: the
    concept least correlated with the label) toward the label by
    ``beta * (2y - 1)``. Binary channels are re-thresholded after adding
    U(-1, 1) jitter, which resolves a disagreement with y with probability
    min(beta / 2, 1).
    """

    mode: str = "flip"
    fpr: float | tuple[float, ...] = 0.0
    fnr: float | tuple[float, ...] = 0.0
    target_precision: float | None = None
    target_recall: float | None = None
    signal: float = 1.0
    noise_std: float = 1.0
    leak_beta: float = 0.0
    leak_concept: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ANNOTATOR_MODES:
            raise ConfigError(f"annotator mode must be one of {ANNOTATOR_MODES}, got {self.mode!r}")
        for name in ("fpr", "fnr"):
            v = getattr(self, name)
            if isinstance(v, list):
                v = tuple(float(x) for x in v)
                object.__setattr__(self, name, v)
            vals = v if isinstance(v, tuple) else (v,)
            if any(not 0.0 <= float(x) <= 1.0 for x in vals):
                raise ConfigError(f"{name} values must lie in [0, 1]")
        if (self.target_precision is None) != (self.target_recall is None):
            raise ConfigError("target_precision and target_recall must be given together")
        if self.target_precision is not None:
            if self.mode != "flip":
                raise ConfigError("precision/recall targets only apply to the flip annotator")
            if not (0 < self.target_precision <= 1 and 0 < self.target_recall <= 1):
                raise ConfigError("target precision and recall must lie in (0, 1]")
        if self.noise_std < 0 or self.leak_beta < 0:
            raise ConfigError("noise_std and leak_beta must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    def rates(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        out = []
        for v in (self.fpr, self.fnr):
            a = np.full(k, float(v)) if not isinstance(v, tuple) else np.asarray(v, dtype=float)
            if a.shape != (k,):
                raise ConfigError(f"per-concept rates have length {a.size}, expected k={k}")
            out.append(a)
        return out[0], out[1]

    def replace(self, **changes) -> "AnnotatorSpec":
        return AnnotatorSpec(**{**self.__dict__, **changes})

    def to_json(self) -> dict:
        out = asdict(self)
        for name in ("fpr", "fnr"):
            if isinstance(out[name], tuple):
                out[name] = list(out[name])
        return out

    @classmethod
    def from_json(cls, obj) -> "AnnotatorSpec":
        _check_keys(obj, set(cls.__dataclass_fields__), "annotator")
        obj = dict(obj)
        for name in ("fpr", "fnr"):
            if isinstance(obj.get(name), list):
                obj[name] = tuple(obj[name])
        return cls(**obj)


def least_label_correlated(ds: LabeledDataset) -> int:
    from cqa.metrics import concept_label_correlations, leakage_order

    return leakage_order(concept_label_correlations(ds.concepts, ds.labels, ds.m))[0]


def simulate_annotator(ds: LabeledDataset, spec: AnnotatorSpec) -> ConceptMatrix:
    """Annotate every row of ``ds`` with the simulated annotator."""
    C = ds.concepts.values
    n, k = C.shape
    if spec.mode == "flip":
        if spec.target_precision is not None:
            fpr, fnr = calibrated_rates(C, spec.target_precision, spec.target_recall)
        else:
            fpr, fnr = spec.rates(k)
        u = rng(spec.seed, "flip").random((n, k))
        A = np.where(C == 1, (u >= fnr).astype(float), (u < fpr).astype(float))
        binary = True
    elif spec.mode == "score":
        noise = rng(spec.seed, "score").normal(scale=spec.noise_std, size=(n, k))
        A = spec.signal * (2 * C - 1) + noise
        binary = False
    else:
        A = C.copy()
        binary = True

    if spec.leak_beta > 0:
        if ds.m != 2:
            raise DataError("label leakage simulation needs a binary label")
        j = spec.leak_concept if spec.leak_concept is not None else least_label_correlated(ds)
        if not 0 <= j < k:
            raise ConfigError(f"leak_concept {j} out of range for k={k}")
        push = spec.leak_beta * (2.0 * ds.labels.values - 1.0)
        if binary:
            u = rng(spec.seed, "leak").uniform(-1.0, 1.0, size=n)
            A[:, j] = ((2.0 * A[:, j] - 1.0) + push + u > 0).astype(float)
        else:
            A[:, j] = A[:, j] + push
    return ConceptMatrix.binary(A) if binary else ConceptMatrix.scores(A)


def calibrate_flip_rates(target_precision: float, target_recall: float,
                         prevalence: float) -> tuple[float, float]:
    """Flip rates whose expected precision/recall equal the targets.

    ``fnr = 1 - recall`` and ``fpr = prev * recall * (1 - precision) /
    (precision * (1 - prev))``. Targets are infeasible when that fpr exceeds
    1, i.e. when precision is below ``prev * recall / (prev * recall + 1 - prev)``.
    """
    p, r, q = float(target_precision), float(target_recall), float(prevalence)
    if not (0.0 < p <= 1.0 and 0.0 < r <= 1.0):
        raise ConfigError("target precision and recall must lie in (0, 1]")
    if not 0.0 < q < 1.0:
        raise ConfigError("prevalence must lie in (0, 1)")
    fnr = 1.0 - r
    fpr = q * r * (1.0 - p) / (p * (1.0 - q))
    if fpr > 1.0:
        bound = q * r / (q * r + 1.0 - q)
        raise ConfigError(
            f"infeasible targets: precision {p} < {bound:.6g}, the minimum reachable with "
            f"recall {r} at prevalence {q}")
    # closed-form check: expected precision and recall under these rates
    p_back = q * r / (q * r + (1.0 - q) * fpr)
    if abs(p_back - p) > 1e-9 or abs((1.0 - fnr) - r) > 1e-12:
        raise ConfigError(f"calibration check failed: precision {p_back} != {p}")
    return fpr, fnr


def calibrated_rates(concepts, precision: float, recall: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-concept (fpr, fnr) hitting the targets at each column's prevalence.

    Constant columns get zero rates (precision or recall is undefined there).
    """
    C = as_matrix(concepts)
    k = C.shape[1]
    fpr, fnr = np.zeros(k), np.zeros(k)
    for j in range(k):
        q = float(C[:, j].mean())
        if 0.0 < q < 1.0:
            fpr[j], fnr[j] = calibrate_flip_rates(precision, recall, q)
    return fpr, fnr


# ------------------------------------------------------------------ entanglement


@dataclass(frozen=True)
class EntangleSpec:
    mixing: np.ndarray = field(repr=False)

    def __post_init__(self):
        M = np.asarray(self.mixing, dtype=np.float64)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise DataError(f"mixing matrix must be square, got {M.shape}")
        if np.any(M < 0) or np.any(np.abs(M.sum(axis=1) - 1.0) > 1e-9):
            raise DataError("mixing rows must be non-negative and sum to 1")
        M = M.copy()
        M.setflags(write=False)
        object.__setattr__(self, "mixing", M)

    @classmethod
    def interpolate(cls, k: int, t: float) -> "EntangleSpec":
        """(1 - t) * identity + t * uniform."""
        return cls((1.0 - t) * np.eye(k) + t * np.full((k, k), 1.0 / k))

    @classmethod
    def pairs(cls, k: int) -> "EntangleSpec":
        """Concepts (0,1), (2,3), ... averaged within each pair."""
        M = np.eye(k)
        for i in range(0, k - 1, 2):
            M[i:i + 2, i:i + 2] = 0.5
        return cls(M)


def entangle(predicted, spec: EntangleSpec) -> ConceptMatrix:
    P = as_matrix(predicted)
    if P.shape[1] != spec.mixing.shape[0]:
        raise DataError(f"mixing is {spec.mixing.shape}, predicted has k={P.shape[1]}")
    return ConceptMatrix.scores(P @ spec.mixing.T)


def _check_keys(obj, allowed: set, where: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where} config must be a JSON object")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in {where} config")
