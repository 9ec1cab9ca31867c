from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Union

from cqa.errors import ConfigError


@dataclass(frozen=True)
class SolverConfig:
    """Hyperparameters for every learner in the toolkit.

    The elastic-net defaults follow the GLM-SAGA settings used for sparse
    inference layers (alpha=0.99, lambda=7e-4, 2000 iterations) and the SVM
    uses C=1. Forest defaults are toolkit choices. ``probe_feature_fraction``
    replaces ``forest_feature_fraction`` for the relevance probes behind DCI
    and OIS, where every split should see every candidate source.
    """

    svm_c: float = 1.0
    elastic_alpha: float = 0.99
    elastic_lambda: float = 7e-4
    elastic_max_iters: int = 2000
    forest_trees: int = 100
    forest_max_depth: int = 8
    forest_feature_fraction: Union[str, float] = "sqrt"
    probe_feature_fraction: Union[str, float] = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.svm_c > 0:
            raise ConfigError(f"svm_c must be positive, got {self.svm_c}")
        if not 0.0 <= self.elastic_alpha <= 1.0:
            raise ConfigError(f"elastic_alpha must lie in [0, 1], got {self.elastic_alpha}")
        if self.elastic_lambda < 0:
            raise ConfigError(f"elastic_lambda must be non-negative, got {self.elastic_lambda}")
        if int(self.elastic_max_iters) < 1:
            raise ConfigError("elastic_max_iters must be >= 1")
        if int(self.forest_trees) < 1:
            raise ConfigError("forest_trees must be >= 1")
        if int(self.forest_max_depth) < 1:
            raise ConfigError("forest_max_depth must be >= 1")
        for name in ("forest_feature_fraction", "probe_feature_fraction"):
            ff = getattr(self, name)
            if isinstance(ff, str):
                if ff != "sqrt":
                    raise ConfigError(f"{name} must be 'sqrt' or a fraction, got {ff!r}")
            elif not 0.0 < float(ff) <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1], got {ff}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def max_features(self, p: int) -> int:
        ff = self.forest_feature_fraction
        if ff == "sqrt":
            return max(1, math.ceil(math.sqrt(p)))
        return max(1, min(p, math.ceil(float(ff) * p)))

    def probe(self) -> "SolverConfig":
        """Config used by the relevance probes."""
        return self.replace(forest_feature_fraction=self.probe_feature_fraction)

    def replace(self, **changes) -> "SolverConfig":
        d = asdict(self)
        d.update(changes)
        return SolverConfig(**d)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "SolverConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(obj) - known)
        if unknown:
            raise ConfigError(f"unknown solver config key: {unknown[0]}")
        return cls(**obj)
