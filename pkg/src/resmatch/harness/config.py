"""Experiment configuration: YAML with strict schema validation.

Unknown keys anywhere in the tree are errors (typos in hyperparameter names
must not silently fall back to defaults).  Every field lands in a dataclass
with the defaults below; the parsed config reserializes into the run
manifest.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ..errors import ConfigError
from ..fields import ChannelParams, CovarianceSpec, Grid
from ..generative import ModelConfig, config_for
from ..simulator import FluidRock, NoiseSpec, Schedule


@dataclass
class DatasetConfig:
    count: int = 2000
    seed: int = 7
    channels: ChannelParams = field(default_factory=ChannelParams)
    covariance: CovarianceSpec | None = None     # continuous background (continuous case)
    streak_amplitude: float = 2.5


@dataclass
class PriorConfig:
    mean: float = float(np.log(1000.0))
    std: float = 1.5
    range_cells: float = 10.0

    def spec(self) -> CovarianceSpec:
        return CovarianceSpec(mean=self.mean, std=self.std, range_cells=self.range_cells)


@dataclass
class ClassifierConfig:
    enabled: bool = True
    count: int = 900
    epochs: int = 10
    batch: int = 64
    lr: float = 1e-3
    seed: int = 77
    feature_width: int = 32


@dataclass
class FlowConfig:
    thickness: float = 10.0
    porosity: float = 0.2
    mu_w: float = 1.0
    mu_o: float = 1.0
    swc: float = 0.2
    sor: float = 0.2
    bhp_producers: float = 200.0
    wir_injectors: float = 500.0
    injector_bhp_limit: float | None = None
    include_injector_rate: bool = False

    def fluid_rock(self) -> FluidRock:
        return FluidRock(mu_w=self.mu_w, mu_o=self.mu_o, swc=self.swc, sor=self.sor,
                         porosity=self.porosity, thickness=self.thickness)


@dataclass
class MdaSection:
    n_a: int = 4
    n_e: int = 100
    seed: int = 31
    prior_seed: int = 400
    latent_seed: int = 21
    param: str = "latent"        # latent | identity

    def __post_init__(self):
        if self.param not in ("latent", "identity"):
            raise ConfigError(f"mda.param must be latent or identity, got {self.param!r}")


@dataclass
class ExperimentConfig:
    case: str = "categorical"
    seed: int = 123
    grid: Grid = field(default_factory=lambda: Grid(32, 32))
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    truth_seed: int = 990
    obs_seed: int = 5
    model: ModelConfig = field(default_factory=lambda: config_for("dcvae"))
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    schedule: Schedule = field(default_factory=Schedule)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    mda: MdaSection = field(default_factory=MdaSection)

    def __post_init__(self):
        if self.case not in ("categorical", "continuous"):
            raise ConfigError(f"case must be categorical or continuous, got {self.case!r}")

    def to_dict(self) -> dict:
        return _asdict_clean(self)

    def section_dict(self, *names: str) -> dict:
        full = self.to_dict()
        return {n: full[n] for n in names}


def _asdict_clean(obj) -> dict:
    d = dataclasses.asdict(obj)

    def clean(v):
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [clean(x) for x in v]
        if isinstance(v, (np.floating, np.integer)):
            return v.item()
        return v

    return clean(d)


_SECTION_TYPES = {
    "grid": Grid,
    "dataset": DatasetConfig,
    "prior": PriorConfig,
    "model": ModelConfig,
    "classifier": ClassifierConfig,
    "flow": FlowConfig,
    "schedule": Schedule,
    "noise": NoiseSpec,
    "mda": MdaSection,
}

_NESTED = {
    ("dataset", "channels"): ChannelParams,
    ("dataset", "covariance"): CovarianceSpec,
}

_TUPLE_FIELDS = {"n_channels", "width_cells", "adam_betas", "adam_betas_adv", "alphas", "out_shape"}


def _build_section(path: str, cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {path!r} must be a mapping")
    valid = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in valid:
            raise ConfigError(f"unknown config key {path}.{key}")
        sub = _NESTED.get((path, key))
        if sub is not None and isinstance(value, dict):
            value = _build_section(f"{path}.{key}", sub, value)
        elif isinstance(value, list) and key in _TUPLE_FIELDS:
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid config section {path!r}: {err}") from err


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("top-level config must be a mapping")
    top_fields = {f.name for f in dataclasses.fields(ExperimentConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in top_fields:
            raise ConfigError(f"unknown config key {key!r}")
        if key in _SECTION_TYPES and isinstance(value, dict):
            if key == "model":
                kind = value.get("kind")
                if kind is None:
                    raise ConfigError("model section needs a kind")
                rest = {k: (tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v)
                        for k, v in value.items() if k != "kind"}
                valid = {f.name for f in dataclasses.fields(ModelConfig)}
                for k in rest:
                    if k not in valid:
                        raise ConfigError(f"unknown config key model.{k}")
                try:
                    kwargs[key] = config_for(kind, **rest)
                except TypeError as err:
                    raise ConfigError(f"invalid model section: {err}") from err
            else:
                kwargs[key] = _build_section(key, _SECTION_TYPES[key], value)
        else:
            kwargs[key] = value
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as err:
        raise ConfigError(f"invalid config: {err}") from err


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse {path}: {err}") from err
    return config_from_dict(data)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
