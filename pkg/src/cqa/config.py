"""Run configuration files."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from cqa._seeding import derive_seed
from cqa.cbmlite import TrainConfig
from cqa.errors import ConfigError
from cqa.learners import SolverConfig
from cqa.synth import AnnotatorSpec, WorldSpec

CONFIG_VERSION = 1
_KEYS = {"version", "world", "annotator", "train", "solver", "output_dir", "seed", "seeds",
         "model_name"}


@dataclass(frozen=True)
class RunConfig:
    """Everything one pipeline run needs.

    ``seed`` is the master seed. The world, annotator and solver seeds are
    derived from it, so any ``seed`` fields inside those sections are
    overwritten by :meth:`resolved`.
    """

    world: WorldSpec
    annotator: AnnotatorSpec | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    output_dir: str = "cqa-out"
    seed: int | None = None
    seeds: tuple[int, ...] = ()
    model_name: str = "cbm"
    version: int = CONFIG_VERSION

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        return RunConfig(**{**self.__dict__, "seed": int(seed)})

    def resolved(self) -> "RunConfig":
        """Copy with component seeds derived from the master seed."""
        if self.seed is None:
            raise ConfigError("no seed: pass --seed or set 'seed' in the config")
        s = int(self.seed)
        if not 0 <= s < 2**64:
            raise ConfigError(f"seed must be a 64-bit unsigned integer, got {s}")
        solver = self.solver.replace(seed=s)
        ann = self.annotator
        if ann is not None:
            ann = ann.replace(seed=derive_seed(s, "annotator"))
        return RunConfig(
            world=self.world.replace(seed=derive_seed(s, "world")), annotator=ann,
            train=self.train.replace(solver=solver, supervision=ann or "ground_truth"),
            solver=solver, output_dir=self.output_dir, seed=s, seeds=self.seeds,
            model_name=self.model_name, version=self.version)

    def to_json(self) -> dict:
        out = {
            "version": self.version, "world": self.world.to_json(),
            "annotator": self.annotator.to_json() if self.annotator else None,
            "train": {k: v for k, v in self.train.to_json().items() if k != "supervision"},
            "solver": self.solver.to_json(), "output_dir": self.output_dir,
            "seeds": list(self.seeds), "model_name": self.model_name,
        }
        if self.seed is not None:
            out["seed"] = self.seed
        return out

    @classmethod
    def from_json(cls, obj) -> "RunConfig":
        if not isinstance(obj, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = sorted(set(obj) - _KEYS)
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        if obj.get("version") != CONFIG_VERSION:
            raise ConfigError(f"config 'version' must be {CONFIG_VERSION}, got {obj.get('version')!r}")
        if "world" not in obj:
            raise ConfigError("config is missing 'world'")
        train = obj.get("train", {})
        if isinstance(train, dict) and "supervision" in train:
            raise ConfigError("unknown key 'supervision' in train config; "
                              "set the top-level 'annotator' instead")
        solver = SolverConfig.from_json(obj.get("solver", {}))
        ann = obj.get("annotator")
        seed = obj.get("seed")
        seeds = obj.get("seeds", [])
        if seed is not None and not isinstance(seed, int):
            raise ConfigError("'seed' must be an integer")
        if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("'seeds' must be a list of integers")
        try:
            world = WorldSpec.from_json(obj["world"])
            annotator = AnnotatorSpec.from_json(ann) if ann is not None else None
            train_cfg = TrainConfig.from_json(train, solver)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from None
        return cls(world=world, annotator=annotator, train=train_cfg, solver=solver,
                   output_dir=str(obj.get("output_dir", "cqa-out")), seed=seed,
                   seeds=tuple(seeds), model_name=str(obj.get("model_name", "cbm")))


def bundled_configs() -> list[str]:
    root = resources.files("cqa") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_config(path_or_name) -> RunConfig:
    """Load a config file, or a bundled config by name (e.g. ``shapes3d-like``)."""
    p = Path(path_or_name)
    if p.is_file():
        text = p.read_text(encoding="utf-8")
    elif str(path_or_name) in bundled_configs():
        text = (resources.files("cqa") / "configs" / f"{path_or_name}.json").read_text("utf-8")
    else:
        raise ConfigError(f"config {str(path_or_name)!r} is neither a file nor a bundled "
                          f"config ({', '.join(bundled_configs())})")
    try:
        obj = json.loads(text)
    except ValueError as e:
        raise ConfigError(f"{path_or_name}: invalid JSON: {e}") from None
    return RunConfig.from_json(obj)
