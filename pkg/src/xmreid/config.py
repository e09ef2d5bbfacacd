"""Experiment configuration: one JSON document with dotted-path overrides.

Unknown keys are rejected by name so typos fail fast; every run writes
the fully resolved configuration next to its outputs.
"""

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .losses import MODES


def _from_dict(cls, payload, prefix):
    if not isinstance(payload, dict):
        raise ConfigurationError("section %r must be an object" % prefix)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in payload:
        if key not in names:
            raise ConfigurationError("unknown config key %r" % ("%s.%s" % (prefix, key) if prefix else key))
    return cls(**payload)


@dataclass
class DatasetSection:
    num_identities: int = 40
    images_per_identity_per_modality: int = 10
    image_size: list = field(default_factory=lambda: [72, 36])
    stripes: int = 6
    noise_level: float = 0.05
    clutter_probability: float = 0.1
    min_code_distance: float = 0.08
    train_fraction: float = 0.5
    seed: int = 1


@dataclass
class SamplerSection:
    n: int = 8
    m: int = 4


@dataclass
class ModelSection:
    variant: str = "toy"
    stage_channels: list = field(default_factory=lambda: [16, 32, 64, 128])
    shared_from_stage: int = 1
    parts: int = 3
    graph_heads: int = 4
    graph_dim: int = 16


@dataclass
class TrainSection:
    mode: str = "B+P+G"
    epochs: int = 80
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip_norm: float = 5.0
    warmup_epochs: int = 10
    lr_decay: dict = field(default_factory=lambda: {30: 0.1, 50: 0.01})
    margin: float = 0.3
    seed: int = 1
    checkpoint_every: int = 20

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError("train.mode must be one of %s, got %r" % (", ".join(MODES), self.mode))
        self.lr_decay = {int(k): float(v) for k, v in self.lr_decay.items()}
        if self.epochs < 1:
            raise ConfigurationError("train.epochs must be >= 1")


@dataclass
class EvalSection:
    ks: list = field(default_factory=lambda: [1, 5, 10, 20])


@dataclass
class ExperimentConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, payload):
        sections = {
            "dataset": DatasetSection, "sampler": SamplerSection,
            "model": ModelSection, "train": TrainSection, "eval": EvalSection,
        }
        for key in payload:
            if key not in sections:
                raise ConfigurationError("unknown config key %r" % key)
        kwargs = {name: _from_dict(sec, payload.get(name, {}), name) for name, sec in sections.items()}
        return cls(**kwargs)

    def to_dict(self):
        payload = dataclasses.asdict(self)
        payload["train"]["lr_decay"] = {str(k): v for k, v in self.train.lr_decay.items()}
        return payload

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(payload: dict, overrides):
    """Apply dotted-path overrides like train.mode=B+P to a raw config dict."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError("override %r must look like section.key=value" % item)
        dotted, _, raw = item.partition("=")
        keys = dotted.strip().split(".")
        if len(keys) < 2:
            raise ConfigurationError("override path %r must name a section and key" % dotted)
        node = payload
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigurationError("override path %r crosses a non-object value" % dotted)
        node[keys[-1]] = _parse_value(raw)
    return payload


def load_experiment_config(path=None, overrides=None, seed=None) -> ExperimentConfig:
    if path is not None:
        try:
            payload = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError("config %s is not valid JSON: %s" % (path, exc)) from exc
    else:
        payload = {}
    apply_overrides(payload, overrides)
    if seed is not None:
        payload.setdefault("dataset", {})["seed"] = seed
        payload.setdefault("train", {})["seed"] = seed
    try:
        return ExperimentConfig.from_dict(payload)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
