"""Experiment configuration: a strict JSON schema with nesting.

Unknown keys are rejected at any depth (typo protection); every run writes
its fully resolved config next to its outputs, and re-parsing that file
reproduces the in-memory config exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from .supernet import SearchSpace, default_space, small_space


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "stripes"        # stripes | blobs | idx
    image_size: int = 16
    classes: int = 4
    train_size: int = 2048
    test_size: int = 512
    noise: float = 1.0
    separation: float = 2.0
    seed: int = 0
    image_path: str = None       # idx only
    label_path: str = None
    augment_crop: bool = False
    augment_flip: bool = False


@dataclass(frozen=True)
class SpaceConfig:
    preset: str = "small"        # small | default | explicit
    explicit: dict = None        # SearchSpace.to_json_dict payload


@dataclass(frozen=True)
class InitConfig:
    scheme: str = "orthogonal-triangular"
    operating_variance: float = 0.03
    weight_variance: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2
    batch: int = 64
    lr: float = 0.05
    momentum: float = 0.9


@dataclass(frozen=True)
class SearchConfig:
    k: int = 5
    strategy: str = "exhaustive"   # exhaustive | evolutionary
    max_flops: int = None
    max_params: int = None


@dataclass(frozen=True)
class RetrainConfig:
    epochs: int = 3
    batch: int = 64
    lr: float = 0.05
    momentum: float = 0.9


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    space: SpaceConfig = field(default_factory=SpaceConfig)
    init: InitConfig = field(default_factory=InitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    retrain: RetrainConfig = field(default_factory=RetrainConfig)

    def build_space(self) -> SearchSpace:
        if self.space.preset == "small":
            return small_space(image_channels=1, image_size=self.dataset.image_size,
                               num_classes=self.dataset.classes)
        if self.space.preset == "default":
            return default_space(image_channels=1, image_size=self.dataset.image_size,
                                 num_classes=self.dataset.classes)
        if self.space.preset == "explicit":
            if self.space.explicit is None:
                raise ConfigError("space.preset='explicit' needs space.explicit")
            return SearchSpace.from_json_dict(self.space.explicit)
        raise ConfigError(f"unknown space preset {self.space.preset!r}")

    def to_json_dict(self):
        return asdict(self)


_SECTIONS = {
    "dataset": DatasetConfig,
    "space": SpaceConfig,
    "init": InitConfig,
    "train": TrainConfig,
    "search": SearchConfig,
    "retrain": RetrainConfig,
}


def _build_section(cls, payload, where):
    if not isinstance(payload, dict):
        raise ConfigError(f"{where}: expected an object")
    allowed = set(cls.__dataclass_fields__)
    unknown = set(payload) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**payload)


def config_from_dict(d):
    if not isinstance(d, dict):
        raise ConfigError("config root must be an object")
    unknown = set(d) - ({"seed"} | set(_SECTIONS))
    if unknown:
        raise ConfigError(f"config: unknown keys {sorted(unknown)}")
    kwargs = {}
    if "seed" in d:
        if not isinstance(d["seed"], int):
            raise ConfigError("seed must be an integer")
        kwargs["seed"] = d["seed"]
    for name, cls in _SECTIONS.items():
        if name in d:
            kwargs[name] = _build_section(cls, d[name], name)
    return ExperimentConfig(**kwargs)


def load_config(path):
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from err
    return config_from_dict(payload)


def save_config(cfg: ExperimentConfig, path):
    with open(path, "w") as fh:
        json.dump(cfg.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
