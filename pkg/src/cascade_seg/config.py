"""Run configuration: a YAML document with nested sections, validated up front."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .phantom import PhantomSpec
from .unet import UNetConfig


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    data_dir: str = "data"
    out_dir: str = "runs/experiment"


@dataclass
class PhantomConfig:
    train_count: int = 40
    test_count: int = 20
    seed: int = 7
    pathology_rate: float = 0.67
    extents: tuple[int, int, int] = (64, 64, 8)
    spacing: tuple[float, float, float] = (1.667, 1.667, 10.0)
    noise_sigma: float = 0.06
    noreflow_probability: float = 0.5

    def __post_init__(self):
        self.extents = tuple(int(e) for e in self.extents)
        self.spacing = tuple(float(s) for s in self.spacing)

    def base_spec(self) -> PhantomSpec:
        return PhantomSpec(
            extents=tuple(self.extents),
            spacing=tuple(self.spacing),
            noise_sigma=self.noise_sigma,
            noreflow_probability=self.noreflow_probability,
        )


@dataclass
class NetConfig:
    base_channels: int = 8
    depth: int = 3
    pool_factors: list[list[int]] | None = None
    max_channels: int = 320

    def unet(self, rank: int, in_channels: int) -> UNetConfig:
        return UNetConfig(
            rank=rank,
            in_channels=in_channels,
            base_channels=self.base_channels,
            depth=self.depth,
            pool_factors=None if self.pool_factors is None else tuple(tuple(p) for p in self.pool_factors),
            max_channels=self.max_channels,
        )


@dataclass
class TrainConfig:
    epochs: int = 10
    lr0: float = 0.01
    augment: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    folds: int = 5
    fold_indices: list[int] | None = None
    dtype: str = "float32"
    min_component_voxels: int = 10
    paths: PathsConfig = field(default_factory=PathsConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    model2d: NetConfig = field(default_factory=lambda: NetConfig(base_channels=8, depth=3))
    model3d: NetConfig = field(
        default_factory=lambda: NetConfig(base_channels=8, depth=2, pool_factors=[[2, 2, 1], [2, 2, 2]])
    )
    train2d: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=2))
    train3d: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10))

    def unet2d(self) -> UNetConfig:
        return self.model2d.unet(2, 1)

    def unet3d(self) -> UNetConfig:
        return self.model3d.unet(3, 6)

    def active_folds(self) -> list[int]:
        return list(range(self.folds)) if self.fold_indices is None else list(self.fold_indices)

    def validate(self, require_data: bool = False) -> None:
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        for f in self.active_folds():
            if not 0 <= f < self.folds:
                raise ConfigError(f"fold index {f} outside 0..{self.folds - 1}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.min_component_voxels < 1:
            raise ConfigError("min_component_voxels must be >= 1")
        for name in ("train2d", "train3d"):
            t = getattr(self, name)
            if t.epochs < 1 or t.lr0 <= 0:
                raise ConfigError(f"{name}: epochs must be >= 1 and lr0 > 0")
        try:
            self.unet2d()
            self.unet3d()
            self.phantom.base_spec().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if require_data and not Path(self.paths.data_dir).is_dir():
            raise ConfigError(f"data_dir {self.paths.data_dir!r} does not exist")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data: dict[str, Any], where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    nested = {
        "paths": PathsConfig,
        "phantom": PhantomConfig,
        "model2d": NetConfig,
        "model3d": NetConfig,
        "train2d": TrainConfig,
        "train3d": TrainConfig,
    }
    for key, value in data.items():
        if cls is RunConfig and key in nested:
            default = getattr(RunConfig(), key)
            merged = {**dataclasses.asdict(default), **(value or {})}
            kwargs[key] = _build(nested[key], merged, f"{where}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(data: dict | None) -> RunConfig:
    cfg = _build(RunConfig, data or {}, "config")
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return from_dict({})
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data)
