"""Run configuration: one JSON document covering every stage, validated strictly."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class WorldConfig:
    shapes: tuple = ("circle", "square", "triangle", "star", "hexagon", "cross", "heart", "diamond")
    colors: tuple = ("red", "green", "blue", "yellow", "purple", "orange")
    sizes: tuple = ("small", "large")
    settings: tuple = (
        "snow", "forest", "desert", "beach", "city", "field",
        "lake", "cave", "garden", "jungle", "river", "mountain",
    )
    min_objects: int = 6
    max_objects: int = 10
    grid: int = 4
    small_extent: tuple = (0.07, 0.11)
    large_extent: tuple = (0.15, 0.22)
    overlap_cap: float = 0.1
    duplicate_prob: float = 0.3
    queries_per_scene: int = 4
    templates: tuple = ("type", "relation")
    caption_max_objects: int = 4
    held_out: tuple = (("red", "star"), ("green", "heart"), ("blue", "cross"), ("yellow", "hexagon"))
    distractors: int = 4
    feature_noise: float = 0.05
    box_noise: float = 0.003
    n_train: int = 5000
    n_eval: int = 500
    n_caption: int = 1000

    def validate(self):
        if not (1 <= self.min_objects <= self.max_objects):
            raise ConfigError("need 1 <= min_objects <= max_objects")
        if self.max_objects > self.grid * self.grid:
            raise ConfigError(
                f"max_objects={self.max_objects} exceeds the {self.grid}x{self.grid} placement grid"
            )
        for name in ("small_extent", "large_extent"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi <= 1.0 / self.grid):
                raise ConfigError(f"{name} must satisfy 0 < lo <= hi <= cell size {1.0 / self.grid}")
        unknown = set(self.templates) - {"type", "relation"}
        if unknown:
            raise ConfigError(f"unknown query templates {sorted(unknown)}")
        for color, shape in self.held_out:
            if color not in self.colors or shape not in self.shapes:
                raise ConfigError(f"held-out pair ({color}, {shape}) is not in the attribute grid")
        if self.queries_per_scene < 0 or self.distractors < 0 or self.caption_max_objects < 1:
            raise ConfigError("counts must be non-negative (caption_max_objects >= 1)")
        if min(self.feature_noise, self.box_noise) < 0:
            raise ConfigError("noise levels must be non-negative")


@dataclass
class ModelConfig:
    d_tok: int = 32
    d_joint: int = 64
    temperature: float = 0.07

    def validate(self):
        if min(self.d_tok, self.d_joint) < 1 or not self.temperature > 0:
            raise ConfigError("model dimensions must be positive and temperature > 0")


@dataclass
class TrainConfig:
    lr: float = 0.001
    momentum: float = 0.9
    ema_decay: float = 0.9998
    lr_drop: float = 0.7  # fraction of total steps after which lr is scaled
    lr_drop_factor: float = 0.1
    epochs: int = 24
    batch_size: int = 8
    cost_weights: tuple = (2.0, 5.0, 2.0)
    loss_weights: dict = field(
        default_factory=lambda: {
            "bce": 1.0, "l1": 5.0, "giou": 2.0,
            "phrase": 1.0, "sentence": 1.0, "caption": 1.0,
        }
    )

    def validate(self):
        if not self.lr >= 0:
            raise ConfigError("lr must be >= 0")
        if not (0.0 <= self.ema_decay <= 1.0):
            raise ConfigError("ema_decay must lie in [0, 1]")
        if not (0.0 <= self.lr_drop <= 1.0) or not self.lr_drop_factor >= 0:
            raise ConfigError("lr_drop must lie in [0, 1] and lr_drop_factor >= 0")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs >= 0 and batch_size >= 1 required")
        expected = {"bce", "l1", "giou", "phrase", "sentence", "caption"}
        if set(self.loss_weights) != expected:
            raise ConfigError(f"loss_weights must have exactly the keys {sorted(expected)}")
        if min(self.loss_weights.values()) < 0 or min(self.cost_weights) < 0:
            raise ConfigError("weights must be non-negative")


@dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    grounding_ks: tuple = (1, 5, 10)
    mmis_ks: tuple = (5, 10, 30)

    def validate(self):
        for ks in (self.grounding_ks, self.mmis_ks):
            if list(ks) != sorted(ks) or min(ks) < 1:
                raise ConfigError("recall ks must be positive and ascending")


@dataclass
class IndexConfig:
    objectness_floor: float = 0.0
    block_rows: int = 16384
    score_with_objectness: bool = False

    def validate(self):
        if self.block_rows < 1:
            raise ConfigError("block_rows must be positive")


@dataclass
class PseudoConfig:
    threshold: float = 0.25

    def validate(self):
        pass


@dataclass
class RunConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    index: IndexConfig = field(default_factory=IndexConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)

    def validate(self) -> "RunConfig":
        for section in (self.world, self.model, self.train, self.eval, self.index, self.pseudo):
            section.validate()
        return self

    def to_dict(self) -> dict:
        out = {"schema_version": SCHEMA_VERSION}
        out.update(dataclasses.asdict(self))
        return out


_SECTIONS = {
    "world": WorldConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "index": IndexConfig,
    "pseudo": PseudoConfig,
}


def _tupleize(value):
    if isinstance(value, list):
        return tuple(_tupleize(v) for v in value)
    return value


def _build_section(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        kwargs[key] = value if key == "loss_weights" else _tupleize(value)
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"config schema_version {version!r} != supported {SCHEMA_VERSION}")
    unknown = set(data) - set(_SECTIONS) - {"schema_version", "seed"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {name: _build_section(cls, data[name], name) for name, cls in _SECTIONS.items() if name in data}
    if "seed" in data:
        if not isinstance(data["seed"], int):
            raise ConfigError("seed must be an integer")
        kwargs["seed"] = data["seed"]
    return RunConfig(**kwargs).validate()


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
