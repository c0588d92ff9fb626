"""Training configuration: JSON file, schema-validated, with documented defaults."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema

from .encoder import EncoderConfig
from .errors import ConfigError
from .objectives import LossWeights


def load_schema() -> dict:
    return json.loads(resources.files("retina_wsss").joinpath("data/config.schema.json").read_text())


@dataclass
class Augment:
    hflip: bool = True
    rotation: float = 10.0  # degrees, symmetric range
    jitter: float = 0.1  # relative intensity scale range

    @property
    def active(self) -> bool:
        return self.hflip or self.rotation > 0 or self.jitter > 0


@dataclass
class TextConfig:
    mode: str = "cache"
    clip_dim: int = 768
    desc_dim: int = 512
    prompt: str = "{}"


@dataclass
class Paths:
    manifest: str
    output: str
    label_embeddings: Optional[str] = None
    description_embeddings: Optional[str] = None


@dataclass
class TrainConfig:
    paths: Paths
    encoder: dict = field(default_factory=lambda: {"preset": "mit_b2"})
    structural_frozen: Optional[list] = None
    input_size: tuple = (512, 512)
    loss_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    gammas: tuple = (1.0, 1.0, 1.0)
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 8
    epochs: int = 30
    seed: int = 0
    augment: Augment = field(default_factory=Augment)
    text: TextConfig = field(default_factory=TextConfig)
    dtype: str = "float32"
    checkpoint_every_epoch: bool = True

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.loss_weights = tuple(float(v) for v in self.loss_weights)
        self.gammas = tuple(float(v) for v in self.gammas)
        self.betas = tuple(float(v) for v in self.betas)
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        LossWeights.of(self.loss_weights)
        self.encoder_config()

    @property
    def weights(self) -> LossWeights:
        return LossWeights.of(self.loss_weights)

    def encoder_config(self) -> EncoderConfig:
        enc = dict(self.encoder)
        preset = enc.pop("preset", None)
        if preset is not None:
            return EncoderConfig.preset(preset, **enc)
        return EncoderConfig(**enc)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("input_size", "loss_weights", "gammas", "betas"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        try:
            jsonschema.validate(doc, load_schema())
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"invalid config at {where}: {exc.message}") from None
        doc = dict(doc)
        doc["paths"] = Paths(**doc["paths"])
        if "augment" in doc:
            doc["augment"] = Augment(**doc["augment"])
        if "text" in doc:
            doc["text"] = TextConfig(**doc["text"])
        return cls(**doc)

    @classmethod
    def read(cls, path) -> "TrainConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        cfg = cls.from_dict(doc)
        # relative paths resolve against the config file's directory
        base = path.parent
        for name in ("manifest", "output", "label_embeddings", "description_embeddings"):
            value = getattr(cfg.paths, name)
            if value is not None and not Path(value).is_absolute():
                setattr(cfg.paths, name, str(base / value))
        return cfg


def toy_config(manifest, output, **overrides) -> TrainConfig:
    """Desk-scale settings used by the synthetic experiments."""
    doc = {
        "paths": {"manifest": str(manifest), "output": str(output)},
        "encoder": {"preset": "toy"},
        "input_size": [256, 256],
        "lr": 3e-4,
        "batch_size": 4,
        "epochs": 30,
        "augment": {"hflip": False, "rotation": 0.0, "jitter": 0.0},
        "text": {"mode": "stub", "clip_dim": 32, "desc_dim": 8},
        "checkpoint_every_epoch": False,
    }
    doc.update(overrides)
    return TrainConfig.from_dict(doc)
