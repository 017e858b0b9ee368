"""Run configuration: strict JSON <-> nested dataclasses."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError
from .models import LatentSpec
from .objectives import OBJECTIVES

DISCRIMINATORS = ("conv", "capsule", "mlp")
DATASETS = ("ring", "mini_digits", "mnist")


@dataclass
class DatasetConfig:
    kind: str = "mini_digits"
    n: int = 10_000
    seed: int = 0
    k: int = 8
    radius: float = 2.0
    sigma: float = 0.02
    noise: float = 0.0
    images: str | None = None
    labels: str | None = None
    holdout: int = 0


@dataclass
class LatentConfig:
    z_dim: int = 64
    r: float = 1.0
    categorical: list = field(default_factory=list)
    continuous: int = 0
    label_dim: int = 0

    def spec(self) -> LatentSpec:
        return LatentSpec(self.z_dim, self.r, tuple(self.categorical), self.continuous, self.label_dim)


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float | None = None      # None: 0.9 for wgan_gp, 0.99 otherwise
    batch: int = 64
    n_critic: int = 5
    lambda_gp: float = 10.0
    lambda_i: float = 1.0
    eps: float = 1e-8


@dataclass
class ModelConfig:
    hidden: int = 128               # MLP width (2-D data)
    n_hidden: int = 3
    g_hidden: int | None = None     # generator MLP width; None means same as hidden
    init: str = "normal"            # "normal": N(0, 0.02) weights; "fan_in": He-scaled
    depth: int = 4                  # conv blocks in D / E
    q_hidden: int = 128
    capsule: dict | None = None     # CapsuleSpec overrides; None picks the desk config for small images


@dataclass
class PathsConfig:
    out_dir: str = "runs/default"
    checkpoint: str | None = None
    metrics: str | None = None
    manifest: str | None = None
    generator: str | None = None    # encoder stage: checkpoint holding the trained G


@dataclass
class TrainConfig:
    objective: str = "wgan_gp"
    discriminator: str = "conv"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    latent: LatentConfig = field(default_factory=LatentConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    epochs: int = 60
    max_steps: int | None = None    # generator (or encoder) steps; overrides epochs when reached first
    scale_factor: float = 1.0
    seed: int = 0
    stage: str = "gan"              # "gan" or "encoder"
    saturating: bool = False        # saturating generator loss for objective=standard
    wall_clock: bool = True         # False writes wall_ms as 0 for byte-stable metrics

    @property
    def beta2(self):
        if self.optim.beta2 is not None:
            return self.optim.beta2
        return 0.9 if self.objective == "wgan_gp" else 0.99

    def validate(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.discriminator not in DISCRIMINATORS:
            raise ConfigError(f"unknown discriminator {self.discriminator!r}")
        if self.dataset.kind not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset.kind!r}")
        if self.stage not in ("gan", "encoder"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.discriminator == "capsule" and self.objective == "wgan_gp":
            raise ConfigError("the capsule discriminator cannot be combined with wgan_gp: "
                              "the gradient penalty through dynamic routing is not supported")
        if self.discriminator == "capsule" and self.objective in ("conditional", "infogan"):
            raise ConfigError("the capsule discriminator supports the standard objective only")
        points = self.dataset.kind == "ring"
        if points != (self.discriminator == "mlp"):
            raise ConfigError("2-D ring data uses discriminator 'mlp'; image data uses 'conv' or 'capsule'")
        lat = self.latent
        if self.objective == "conditional" and lat.label_dim < 1:
            raise ConfigError("conditional objective needs latent.label_dim >= 1")
        if self.objective == "infogan" and not (lat.categorical or lat.continuous):
            raise ConfigError("infogan needs at least one latent code")
        if lat.label_dim and self.objective not in ("conditional", "wgan_gp"):
            raise ConfigError("label_dim is only used by the conditional and wgan_gp objectives")
        if self.optim.batch < 2:
            raise ConfigError("batch size must be >= 2")
        if self.optim.n_critic < 1:
            raise ConfigError("n_critic must be >= 1")
        if self.objective == "wgan_gp" and not self.optim.lambda_gp > 0:
            raise ConfigError("wgan_gp needs lambda_gp > 0")
        if self.model.init not in ("normal", "fan_in"):
            raise ConfigError(f"unknown model.init {self.model.init!r}")
        if self.scale_factor <= 0:
            raise ConfigError("scale_factor must be positive")
        if self.dataset.kind == "mnist" and not self.dataset.images:
            raise ConfigError("mnist dataset needs dataset.images")
        if self.stage == "encoder" and not self.paths.generator:
            raise ConfigError("encoder stage needs paths.generator (a trained G checkpoint)")
        lat.spec()
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{where}.{name}") if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


_NESTED = {
    (TrainConfig, "dataset"): DatasetConfig,
    (TrainConfig, "latent"): LatentConfig,
    (TrainConfig, "optim"): OptimConfig,
    (TrainConfig, "model"): ModelConfig,
    (TrainConfig, "paths"): PathsConfig,
}


def config_from_dict(data: dict) -> TrainConfig:
    return _build(TrainConfig, data, "config").validate()


def load_config(path) -> TrainConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)
