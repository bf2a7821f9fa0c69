"""Run configuration: one YAML document drives every pipeline stage.

Example::

    schema: cntpp-run/1
    world: {n_users: 1500, n_news: 40, seed: 0}   # or world_path: world.yaml
    train: {epochs: 150, batch_size: 128, lr: 0.001}
    effect: {window: 10.0, step: 0.05}
    oracle: {rollouts: 200}
    seeds: {world: 0, model: 0, oracle: 0}
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import yaml

from .training import TrainConfig
from .world import WorldSpec

CONFIG_SCHEMA = "cntpp-run/1"


class ConfigError(ValueError):
    pass


@dataclass
class EffectConfig:
    window: float = 10.0
    step: Optional[float] = None  # None means window / 200
    eps_count: float = 1e-3
    mode: str = "quadrature"  # or "rollout"
    rollouts: int = 100


@dataclass
class OracleConfig:
    rollouts: int = 200
    max_items: Optional[int] = None  # cap on test engagements scored (None = all)


@dataclass
class Seeds:
    world: int = 0
    model: int = 0
    oracle: int = 0


@dataclass
class RunConfig:
    world: WorldSpec = field(default_factory=WorldSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    effect: EffectConfig = field(default_factory=EffectConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    seeds: Seeds = field(default_factory=Seeds)
    split: tuple = (8, 2, 3)
    world_path: Optional[str] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.effect.window <= 0 or (self.effect.step is not None and self.effect.step <= 0):
            raise ConfigError("effect window and step must be positive")
        if self.effect.mode not in ("quadrature", "rollout"):
            raise ConfigError(f"unknown effect mode {self.effect.mode!r}")
        if self.oracle.rollouts < 2:
            raise ConfigError("oracle needs at least two rollouts")
        if len(self.split) != 3 or min(self.split) <= 0:
            raise ConfigError("split must be three positive weights")
        t = self.train
        if t.epochs < 1 or t.batch_size < 1 or t.lr <= 0:
            raise ConfigError("epochs, batch and lr must be positive")
        if not 0 <= t.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.world_path is not None and not Path(self.world_path).is_file():
            raise ConfigError(f"world spec {self.world_path} does not exist")

    # seeds are authoritative: the world/train sections inherit them
    def resolved(self) -> "RunConfig":
        return replace(self, world=replace(self.world, seed=self.seeds.world),
                       train=replace(self.train, seed=self.seeds.model))

    def to_dict(self) -> dict:
        r = self.resolved()
        return {
            "schema": CONFIG_SCHEMA,
            "world": r.world.to_dict(),
            "train": r.train.to_dict(),
            "effect": asdict(r.effect),
            "oracle": asdict(r.oracle),
            "seeds": asdict(r.seeds),
            "split": list(r.split),
        }

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def stamp(self) -> dict:
        """Header fields embedded in every artifact."""
        return {"config_hash": self.hash(), "seeds": asdict(self.seeds)}

    @classmethod
    def from_dict(cls, doc: dict, base_dir: Optional[Path] = None) -> "RunConfig":
        doc = dict(doc or {})
        schema = doc.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ConfigError(f"unsupported config schema {schema!r}")
        try:
            world_path = doc.pop("world_path", None)
            world_doc = dict(doc.pop("world", {}) or {})
            if world_path is not None:
                wp = Path(world_path)
                if base_dir is not None and not wp.is_absolute():
                    wp = base_dir / wp
                if not wp.is_file():
                    raise ConfigError(f"world spec {wp} does not exist")
                world_path = str(wp)
                world = WorldSpec.load(wp)
                if world_doc:
                    world = WorldSpec.from_dict({**world.to_dict(), **world_doc})
            else:
                world = WorldSpec.from_dict(world_doc)
            seeds = _section(Seeds, doc.pop("seeds", {}))
            if "seed" in world_doc and "world" not in (doc.get("seeds") or {}):
                seeds.world = world.seed
            cfg = cls(
                world=world,
                train=_section(TrainConfig, doc.pop("train", {})),
                effect=_section(EffectConfig, doc.pop("effect", {})),
                oracle=_section(OracleConfig, doc.pop("oracle", {})),
                seeds=seeds,
                split=tuple(doc.pop("split", (8, 2, 3))),
                world_path=world_path,
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        if doc:
            raise ConfigError(f"unknown config keys {sorted(doc)}")
        return cfg

    @classmethod
    def load(cls, path: Path | str) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config {path} does not exist")
        try:
            doc = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if doc is not None and not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(doc or {}, base_dir=path.parent)


def _section(klass, doc):
    doc = dict(doc or {})
    names = {f.name for f in fields(klass)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigError(f"unknown {klass.__name__} keys {sorted(unknown)}")
    return klass(**doc)


def desk_config(**world_overrides) -> RunConfig:
    return RunConfig(world=WorldSpec.desk(**world_overrides))
