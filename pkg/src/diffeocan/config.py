"""Run configuration: strict JSON sections with two built-in profiles."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Optional

from .canon import CanonConfig
from .data import RbfConfig, SquaresConfig
from .energy import MNIST_WEIGHTS, SYNTHETIC_WEIGHTS, EnergyWeights
from .nets.train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RbfSection:
    spacing: float = 16.0
    bandwidth: float = 8.0
    max_displacement: float = 6.0
    seed: int = 1
    taper_margin: float = 16.0

    def build(self, seed_offset: int = 0) -> RbfConfig:
        return RbfConfig(spacing=self.spacing, bandwidth=self.bandwidth,
                         max_displacement=self.max_displacement, seed=self.seed + seed_offset,
                         taper_margin=self.taper_margin)


@dataclass
class DataSection:
    kind: str = "squares"
    n_train: int = 200
    n_val: int = 50
    n_test: int = 100
    size: int = 64
    noise_sigma: float = 0.05
    permute_intensities: bool = False
    mnist_dir: Optional[str] = None
    rbf: RbfSection = field(default_factory=RbfSection)

    def squares(self) -> SquaresConfig:
        return SquaresConfig(shape=(self.size, self.size), noise_sigma=self.noise_sigma,
                             permute_intensities=self.permute_intensities)


@dataclass
class TrainSection:
    lr: float = 1e-3
    batch_size: int = 1
    epochs: int = 50

    def build(self, seed: int) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, epochs=self.epochs, seed=seed)


@dataclass
class VaeSection(TrainSection):
    latent_dim: int = 10
    kl_weight: float = 1e-3


@dataclass
class DiscSection(TrainSection):
    lr: float = 1e-3
    batch_size: int = 16
    mu: float = 10.0
    real_jitter: float = 0.5


@dataclass
class InnerSection(TrainSection):
    batch_size: int = 2
    epochs: int = 10


@dataclass
class WeightsSection:
    lambda_vae: float = SYNTHETIC_WEIGHTS.lambda_vae
    lambda_adv: float = SYNTHETIC_WEIGHTS.lambda_adv
    lambda_grad: float = SYNTHETIC_WEIGHTS.lambda_grad
    lambda_jac: float = SYNTHETIC_WEIGHTS.lambda_jac

    def build(self) -> EnergyWeights:
        return EnergyWeights(**asdict(self))


@dataclass
class CanonSection:
    steps: int = 100
    lr: float = 1e-3
    scale: float = 4.0
    squaring_cap: int = 10
    weights: WeightsSection = field(default_factory=WeightsSection)

    def build(self, seed: int, steps: int | None = None) -> CanonConfig:
        return CanonConfig(steps=self.steps if steps is None else steps, lr=self.lr,
                           weights=self.weights.build(), squaring_cap=self.squaring_cap,
                           seed=seed, scale=self.scale)


@dataclass
class BenchSection:
    n_test: int = 100
    n_pairs: int = 20
    jobs: int = 1


@dataclass
class PathsSection:
    data: str = "data"
    models: str = "models"
    out: str = "out"


@dataclass
class RunConfig:
    profile: str = "synthetic"
    seed: Optional[int] = None
    data: DataSection = field(default_factory=DataSection)
    train_vae: VaeSection = field(default_factory=VaeSection)
    train_disc: DiscSection = field(default_factory=DiscSection)
    train_inner: InnerSection = field(default_factory=InnerSection)
    canon: CanonSection = field(default_factory=CanonSection)
    bench: BenchSection = field(default_factory=BenchSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def resolved_seed(self) -> int:
        """Config seed, else ``DIFFEOCAN_SEED``, else 0."""
        if self.seed is not None:
            return int(self.seed)
        env = os.environ.get("DIFFEOCAN_SEED")
        if env is None:
            return 0
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"DIFFEOCAN_SEED must be an integer, got {env!r}") from None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _mnist_profile() -> RunConfig:
    w = WeightsSection(**asdict(MNIST_WEIGHTS))
    return RunConfig(
        profile="mnist",
        data=DataSection(kind="mnist", n_train=1000, n_val=0, n_test=100, size=28, noise_sigma=0.0,
                         rbf=RbfSection(spacing=7.0, bandwidth=3.5, max_displacement=2.5, taper_margin=6.0)),
        train_vae=VaeSection(epochs=20, batch_size=8),
        train_disc=DiscSection(epochs=20),
        train_inner=InnerSection(batch_size=16, epochs=10),
        canon=CanonSection(weights=w),
    )


PROFILES = {"synthetic": RunConfig, "mnist": _mnist_profile}


def _merge(obj, updates: dict, where: str):
    if not isinstance(updates, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    known = {f.name: f for f in fields(obj)}
    changes = {}
    for key, value in updates.items():
        path = f"{where}.{key}" if where else key
        if key not in known:
            raise ConfigError(f"unknown config key '{path}'")
        current = getattr(obj, key)
        if is_dataclass(current):
            changes[key] = _merge(current, value, path)
        else:
            changes[key] = _coerce(current, value, path)
    return replace(obj, **changes)


def _coerce(current, value, path: str):
    if current is None or value is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"'{path}' must be true or false")
        return value
    if isinstance(current, (int, float)):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{path}' must be a number")
        if isinstance(current, int) and not isinstance(current, bool) and float(value) != int(value):
            raise ConfigError(f"'{path}' must be an integer")
        return type(current)(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"'{path}' must be a string")
        return value
    return value


def load_config(path=None, profile: str | None = None) -> RunConfig:
    """Profile defaults overlaid with a JSON document; unknown keys are errors."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
    name = profile or doc.get("profile", "synthetic")
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    cfg = _merge(PROFILES[name](), {**doc, "profile": name}, "")
    if cfg.data.kind not in ("squares", "mnist"):
        raise ConfigError(f"data.kind must be 'squares' or 'mnist', got {cfg.data.kind!r}")
    return cfg
