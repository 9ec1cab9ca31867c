"""Core containers shared by every module, plus dataset/concept file I/O.

All containers validate eagerly and hold read-only numpy arrays, so they can be
shared between threads without copying.
"""
from __future__ import annotations

import enum
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from cqa.errors import DataError

SPLITS = ("train", "val", "test")

DATASET_MAGIC = "#cqa-dataset"
CONCEPTS_MAGIC = "#cqa-concepts"
FORMAT_VERSION = "v1"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def fmt_float(x: float) -> str:
    """Decimal text with 17 significant digits (exact float64 round trip)."""
    return format(float(x), ".17g")


@dataclass(frozen=True)
class Vocabulary:
    names: tuple[str, ...]
    groups: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        groups = tuple(tuple(int(i) for i in g) for g in self.groups)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "groups", groups)
        if any(not n.strip() for n in names):
            raise DataError("vocabulary contains an empty concept name")
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise DataError(f"duplicate concept names: {dup}")
        seen: set[int] = set()
        for g in groups:
            for i in g:
                if not 0 <= i < len(names):
                    raise DataError(f"group index {i} out of range for k={len(names)}")
                if i in seen:
                    raise DataError(f"concept {i} appears in more than one group")
                seen.add(i)

    def __len__(self):
        return len(self.names)

    @property
    def k(self) -> int:
        return len(self.names)

    def ungrouped(self) -> list[int]:
        grouped = {i for g in self.groups for i in g}
        return [i for i in range(self.k) if i not in grouped]

    def to_json(self) -> dict:
        return {"names": list(self.names), "groups": [list(g) for g in self.groups]}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        if not isinstance(obj, dict) or "names" not in obj:
            raise DataError("vocabulary JSON must be an object with a 'names' list")
        return cls(tuple(obj["names"]), tuple(tuple(g) for g in obj.get("groups", [])))


class ConceptKind(str, enum.Enum):
    BINARY = "binary"
    SCORES = "scores"


@dataclass(frozen=True)
class ConceptMatrix:
    values: np.ndarray
    kind: ConceptKind = ConceptKind.SCORES

    def __post_init__(self):
        kind = ConceptKind(self.kind)
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DataError(f"concept matrix must be 2-D, got shape {v.shape}")
        bad = np.argwhere(~np.isfinite(v))
        if len(bad):
            r, c = bad[0]
            raise DataError(f"non-finite concept value at row {r}, column {c}")
        if kind is ConceptKind.BINARY:
            bad = np.argwhere((v != 0.0) & (v != 1.0))
            if len(bad):
                r, c = bad[0]
                raise DataError(f"non-binary entry {v[r, c]!r} at row {r}, column {c}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "values", _frozen(v))

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def k(self) -> int:
        return self.values.shape[1]

    @property
    def is_binary(self) -> bool:
        return self.kind is ConceptKind.BINARY

    def rows(self, mask) -> "ConceptMatrix":
        return ConceptMatrix(self.values[mask], self.kind)

    def columns(self, idx) -> "ConceptMatrix":
        return ConceptMatrix(self.values[:, idx], self.kind)

    @classmethod
    def binary(cls, values) -> "ConceptMatrix":
        return cls(values, ConceptKind.BINARY)

    @classmethod
    def scores(cls, values) -> "ConceptMatrix":
        return cls(values, ConceptKind.SCORES)


@dataclass(frozen=True)
class LabelVector:
    values: np.ndarray
    m: int

    def __post_init__(self):
        raw = np.asarray(self.values)
        if raw.ndim != 1:
            raise DataError(f"labels must be 1-D, got shape {raw.shape}")
        if raw.size and not np.all(np.equal(np.mod(raw, 1), 0)):
            raise DataError("labels must be integer class ids")
        v = raw.astype(np.int64)
        m = int(self.m)
        if m < 2:
            raise DataError(f"class count m must be >= 2, got {m}")
        bad = np.flatnonzero((v < 0) | (v >= m))
        if len(bad):
            raise DataError(f"label {v[bad[0]]} at row {bad[0]} outside [0, {m})")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "values", _frozen(v))

    def __len__(self):
        return len(self.values)

    def rows(self, mask) -> "LabelVector":
        return LabelVector(self.values[mask], self.m)


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    concepts: ConceptMatrix
    labels: LabelVector
    vocabulary: Vocabulary
    split: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {X.shape}")
        bad = np.argwhere(~np.isfinite(X))
        if len(bad):
            r, c = bad[0]
            raise DataError(f"non-finite feature at row {r}, column {c}")
        split = np.asarray(self.split).astype(str)
        n = X.shape[0]
        if not (self.concepts.n == len(self.labels) == len(split) == n):
            raise DataError(
                f"row counts disagree: features={n}, concepts={self.concepts.n}, "
                f"labels={len(self.labels)}, split={len(split)}"
            )
        if self.concepts.k != self.vocabulary.k:
            raise DataError(
                f"concept width {self.concepts.k} != vocabulary size {self.vocabulary.k}"
            )
        if not self.concepts.is_binary:
            raise DataError("ground-truth concepts must be binary")
        unknown = sorted(set(split) - set(SPLITS))
        if unknown:
            row = int(np.flatnonzero(split == unknown[0])[0])
            raise DataError(f"unknown split tag {unknown[0]!r} at row {row}")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "split", _frozen(split))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def k(self) -> int:
        return self.concepts.k

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def m(self) -> int:
        return self.labels.m

    def mask(self, split: str) -> np.ndarray:
        return self.split == split

    def require_splits(self, *splits: str) -> None:
        for s in splits or SPLITS:
            if not self.mask(s).any():
                raise DataError(f"split {s!r} is empty")


@dataclass(frozen=True)
class RelevanceMatrix:
    """Entry (i, j): relevance of source concept i for predicting target j."""

    entries: np.ndarray
    degenerate_targets: tuple[int, ...] = ()

    def __post_init__(self):
        R = np.asarray(self.entries, dtype=np.float64)
        if R.ndim != 2 or R.shape[0] != R.shape[1]:
            raise DataError(f"relevance matrix must be square, got {R.shape}")
        if np.any(~np.isfinite(R)) or np.any(R < 0):
            raise DataError("relevance entries must be finite and non-negative")
        sums = R.sum(axis=0)
        zero = np.flatnonzero(sums == 0)
        bad = np.flatnonzero((sums != 0) & (np.abs(sums - 1.0) > 1e-9))
        if len(bad):
            raise DataError(f"relevance column {bad[0]} sums to {sums[bad[0]]}, expected 1 or 0")
        object.__setattr__(self, "entries", _frozen(R))
        object.__setattr__(self, "degenerate_targets", tuple(int(j) for j in zero))

    @property
    def k(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class EvalReport:
    f1_y: float
    auc_c: float
    leak: float
    dis: float
    ois: float
    gap_curve: tuple[float, ...]
    relevance_learned: RelevanceMatrix
    relevance_gt: RelevanceMatrix
    skipped_concepts: tuple[int, ...] = ()
    gap_order: tuple[int, ...] = ()
    f1_cbm: tuple[float, ...] = ()
    f1_gt: tuple[float, ...] = ()
    per_concept_auc: tuple[float | None, ...] = ()
    per_concept_d: tuple[float, ...] = ()
    concept_names: tuple[str, ...] = ()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        k = self.relevance_learned.k
        for name in ("leak", "dis", "auc_c"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DataError(f"{name}={v} outside [0, 1]")
        if len(self.gap_curve) != k:
            raise DataError(f"gap_curve has {len(self.gap_curve)} entries, expected k={k}")

    @property
    def ois_clamped(self) -> float:
        return min(self.ois, 1.0)

    @property
    def model_name(self) -> str:
        return str(self.metadata.get("model", "model"))

    METRICS = ("f1_y", "auc_c", "leak", "dis", "ois")

    def metric_row(self) -> dict[str, float]:
        return {m: float(getattr(self, m)) for m in self.METRICS}


# ---------------------------------------------------------------- file I/O


def _parse_header(line: str, magic: str, path) -> dict[str, str]:
    parts = line.strip().split()
    if len(parts) < 2 or parts[0] != magic:
        raise DataError(f"{path}: line 1: expected header starting with '{magic}'")
    if parts[1] != FORMAT_VERSION:
        raise DataError(f"{path}: line 1: unsupported version {parts[1]!r}")
    fields = {}
    for tok in parts[2:]:
        key, sep, val = tok.partition("=")
        if not sep:
            raise DataError(f"{path}: line 1: malformed header field {tok!r}")
        fields[key] = val
    return fields


def _header_int(fields: dict, key: str, path) -> int:
    try:
        return int(fields[key])
    except KeyError:
        raise DataError(f"{path}: line 1: header missing '{key}='") from None
    except ValueError:
        raise DataError(f"{path}: line 1: header field {key}={fields[key]!r} is not an integer") from None


def _parse_floats(text: str, expected: int, lineno: int, row: int, section: str, path) -> list[float]:
    toks = text.split(",") if text.strip() else []
    if len(toks) != expected:
        raise DataError(
            f"{path}: line {lineno}: {section} section has {len(toks)} values, expected {expected}"
        )
    out = []
    for col, tok in enumerate(toks):
        try:
            v = float(tok)
        except ValueError:
            raise DataError(f"{path}: line {lineno} (row {row}): {section} column {col}: cannot parse {tok!r}") from None
        if not math.isfinite(v):
            raise DataError(f"{path}: line {lineno} (row {row}): {section} column {col}: non-finite value {tok!r}")
        out.append(v)
    return out


def atomic_write_text(path, text: str) -> None:
    """Write to a temp name beside ``path`` and rename only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def _concept_text(v: float, binary: bool) -> str:
    return str(int(v)) if binary else fmt_float(v)


def dumps_dataset(ds: LabeledDataset) -> str:
    lines = [
        f"{DATASET_MAGIC} {FORMAT_VERSION} n={ds.n} k={ds.k} d={ds.d} m={ds.m}",
        json.dumps(ds.vocabulary.to_json(), ensure_ascii=False),
    ]
    C = ds.concepts.values
    for i in range(ds.n):
        feats = ",".join(fmt_float(x) for x in ds.features[i])
        concepts = ",".join(_concept_text(x, True) for x in C[i])
        lines.append(f"{ds.split[i]}|{feats}|{concepts}|{int(ds.labels.values[i])}")
    return "\n".join(lines) + "\n"


def save_dataset(ds: LabeledDataset, path) -> None:
    try:
        atomic_write_text(path, dumps_dataset(ds))
    except OSError as exc:
        raise DataError(f"cannot write dataset to {path}: {exc}") from exc


def load_dataset(path) -> LabeledDataset:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise DataError(f"{path}: empty file")
    hdr = _parse_header(lines[0], DATASET_MAGIC, path)
    n, k, d, m = (_header_int(hdr, key, path) for key in ("n", "k", "d", "m"))
    if len(lines) < 2:
        raise DataError(f"{path}: line 2: missing vocabulary JSON line")
    try:
        vocab = Vocabulary.from_json(json.loads(lines[1]))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: line 2: invalid vocabulary JSON: {exc}") from None
    if vocab.k != k:
        raise DataError(f"{path}: line 2: vocabulary has {vocab.k} names, header says k={k}")
    body = [ln for ln in lines[2:] if ln.strip()]
    if len(body) != n:
        raise DataError(f"{path}: header says n={n} rows but file has {len(body)}")

    X = np.empty((n, d))
    C = np.empty((n, k))
    y = np.empty(n, dtype=np.int64)
    split = []
    for i, ln in enumerate(body):
        lineno = i + 3
        sections = ln.split("|")
        if len(sections) != 4:
            raise DataError(f"{path}: line {lineno}: expected 4 '|'-separated sections, got {len(sections)}")
        tag = sections[0].strip()
        if tag not in SPLITS:
            raise DataError(f"{path}: line {lineno} (row {i}): unknown split tag {tag!r}")
        split.append(tag)
        X[i] = _parse_floats(sections[1], d, lineno, i, "feature", path)
        row = _parse_floats(sections[2], k, lineno, i, "concept", path)
        for col, v in enumerate(row):
            if v not in (0.0, 1.0):
                raise DataError(f"{path}: line {lineno} (row {i}): concept column {col}: non-binary entry {v!r}")
        C[i] = row
        try:
            y[i] = int(sections[3])
        except ValueError:
            raise DataError(f"{path}: line {lineno} (row {i}): label {sections[3]!r} is not an integer") from None
        if not 0 <= y[i] < m:
            raise DataError(f"{path}: line {lineno} (row {i}): label {y[i]} outside [0, {m})")
    return LabeledDataset(X, ConceptMatrix.binary(C), LabelVector(y, m), vocab, np.array(split))


def dumps_concepts(cm: ConceptMatrix) -> str:
    binary = cm.is_binary
    lines = [f"{CONCEPTS_MAGIC} {FORMAT_VERSION} n={cm.n} k={cm.k} kind={cm.kind.value}"]
    lines += [",".join(_concept_text(v, binary) for v in row) for row in cm.values]
    return "\n".join(lines) + "\n"


def save_concepts(cm: ConceptMatrix, path) -> None:
    try:
        atomic_write_text(path, dumps_concepts(cm))
    except OSError as exc:
        raise DataError(f"cannot write concepts to {path}: {exc}") from exc


def load_concepts(path) -> ConceptMatrix:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read concepts {path}: {exc}") from exc
    if not lines:
        raise DataError(f"{path}: empty file")
    hdr = _parse_header(lines[0], CONCEPTS_MAGIC, path)
    n, k = _header_int(hdr, "n", path), _header_int(hdr, "k", path)
    try:
        kind = ConceptKind(hdr.get("kind", ""))
    except ValueError:
        raise DataError(f"{path}: line 1: kind must be 'binary' or 'scores'") from None
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != n:
        raise DataError(f"{path}: header says n={n} rows but file has {len(body)}")
    V = np.empty((n, k))
    for i, ln in enumerate(body):
        V[i] = _parse_floats(ln, k, i + 2, i, "concept", path)
        if kind is ConceptKind.BINARY:
            bad = np.flatnonzero((V[i] != 0) & (V[i] != 1))
            if len(bad):
                raise DataError(f"{path}: line {i + 2} (row {i}): column {bad[0]}: non-binary entry {V[i, bad[0]]!r}")
    return ConceptMatrix(V, kind)


def as_matrix(x: Any) -> np.ndarray:
    """Plain float array from a ConceptMatrix or array-like."""
    if isinstance(x, ConceptMatrix):
        return np.asarray(x.values)
    return np.asarray(x, dtype=np.float64)


def as_labels(y: Any) -> np.ndarray:
    if isinstance(y, LabelVector):
        return np.asarray(y.values)
    return np.asarray(y, dtype=np.int64)


def concept_names(vocab: Vocabulary | None, k: int) -> Sequence[str]:
    return vocab.names if vocab is not None else tuple(f"c{j}" for j in range(k))
