"""Experiment configuration and its flat key=value file format.

Every field serializes to one `key = value` line (kebab-case keys, '#'
comments allowed); parsing rejects unknown keys. The same text block is
echoed into checkpoints so a trained model can be rebuilt from its file
alone.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .backbone import BackboneConfig, InitScheme, Position, Routing
from .data import SyntheticSpec
from .errors import ConfigError
from .tensor import Precision
from .training import LossWeights, TrainSettings

_CHOICES = {
    "routing": tuple(r.value for r in Routing),
    "position": tuple(p.value for p in Position),
    "init": tuple(i.value for i in InitScheme),
    "precision": tuple(p.value for p in Precision),
    "both_order": ("attend-first", "concat-first"),
}


@dataclass
class ExperimentConfig:
    # backbone
    stages: int = 3
    base_channels: int = 8
    in_channels: int = 1
    num_classes: int = 4
    routing: str = "skip-only"
    position: str = "full"
    init: str = "zero"
    both_order: str = "attend-first"
    # training
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    ce_weight: float = 0.3
    dice_weight: float = 0.7
    dice_smooth: float = 1.0
    precision: str = "single"
    seed: int = 0
    # data (synthetic unless data_dir is set)
    data_count: int = 200
    image_size: int = 64
    noise_std: float = 0.08
    shapes_min: int = 1
    shapes_max: int = 3
    data_seed: int = 1234
    data_dir: str = ""
    # output
    out_dir: str = "runs"
    run_id: str = ""

    def validate(self):
        for name, choices in _CHOICES.items():
            if getattr(self, name) not in choices:
                raise ConfigError(
                    f"{name.replace('_', '-')} must be one of {choices}, "
                    f"got {getattr(self, name)!r}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch-size must be >= 1, got {self.batch_size}")
        self.backbone_config().validate()
        if not self.data_dir:
            self.synthetic_spec().validate()
        return self

    # ------------------------------------------------------ derived configs

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            stages=self.stages, base_channels=self.base_channels,
            in_channels=self.in_channels, num_classes=self.num_classes,
            routing=Routing(self.routing), position=Position(self.position),
            init_scheme=InitScheme(self.init), seed=self.seed,
            both_concat_first=self.both_order == "concat-first")

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            count=self.data_count, size=self.image_size,
            num_classes=self.num_classes, shapes_min=self.shapes_min,
            shapes_max=self.shapes_max, noise_std=self.noise_std,
            seed=self.data_seed)

    def train_settings(self) -> TrainSettings:
        return TrainSettings(
            epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
            learning_rate=self.learning_rate, weight_decay=self.weight_decay,
            beta1=self.beta1, beta2=self.beta2, adam_epsilon=self.adam_epsilon,
            loss=LossWeights(self.ce_weight, self.dice_weight, self.dice_smooth))

    def precision_mode(self) -> Precision:
        return Precision(self.precision)

    def resolved_run_id(self) -> str:
        if self.run_id:
            return self.run_id
        return f"{self.routing}_{self.position}_{self.init}_seed{self.seed}"

    # --------------------------------------------------------- serialization

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name.replace('_', '-')} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text) -> "ExperimentConfig":
        known = {f.name.replace("_", "-"): f for f in fields(cls)}
        cfg = cls()
        seen = set()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in known:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in seen:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            seen.add(key)
            f = known[key]
            try:
                if f.type == "int":
                    parsed = int(value)
                elif f.type == "float":
                    parsed = float(value)
                else:
                    parsed = value
            except ValueError:
                raise ConfigError(
                    f"line {lineno}: cannot parse {value!r} as {f.type} for {key}") from None
            setattr(cfg, f.name, parsed)
        return cfg.validate()

    def replace(self, **updates) -> "ExperimentConfig":
        names = {f.name for f in fields(self)}
        cfg = ExperimentConfig(**{f.name: getattr(self, f.name) for f in fields(self)})
        for key, value in updates.items():
            if key not in names:
                raise ConfigError(f"unknown config field {key!r}")
            setattr(cfg, key, value)
        return cfg
