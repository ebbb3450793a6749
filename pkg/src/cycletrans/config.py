"""Experiment configuration: strict TOML <-> nested dataclasses."""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .data import DataConfig
from .evaluation import EvalConfig
from .models import ConfigError, DiscriminatorSpec, GeneratorSpec
from .toybench import ToyDomainSpec
from .training import TrainConfig


@dataclass
class ModelConfig:
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    seed: int = 0


@dataclass
class ToyConfig:
    spec: ToyDomainSpec = field(default_factory=ToyDomainSpec)
    n_test: int = 20


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(freeze_disc_epochs=0))
    finetune: TrainConfig = field(default_factory=lambda: TrainConfig(decay="linear"))
    eval: EvalConfig = field(default_factory=EvalConfig)
    toy: ToyConfig = field(default_factory=ToyConfig)
    output_dir: str = "runs/experiment"


# sections whose loss weights must be written out explicitly
_MANDATORY_WEIGHTS = ("train", "finetune")


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _build(cls, values: dict, where: str, defaults=None):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a table, got {type(values).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) in [{where}]: {', '.join(unknown)}")
    kwargs = dataclasses.asdict(defaults) if defaults is not None else {}
    # asdict flattens nested dataclasses; rebuild them from their defaults below
    for f in dataclasses.fields(cls):
        tp = hints[f.name]
        sub = f"{where}.{f.name}" if where else f.name
        if _is_dataclass_type(tp):
            base = getattr(defaults, f.name) if defaults is not None else None
            if f.name in values:
                kwargs[f.name] = _build(tp, values[f.name], sub, base)
            elif base is not None:
                kwargs[f.name] = base
            continue
        if f.name in values:
            kwargs[f.name] = _coerce(values[f.name], tp, sub)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return _coerce(value, args[0], where) if len(args) == 1 else value
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if tp is int and isinstance(value, float):
        raise ConfigError(f"{where}: expected an integer, got {value}")
    return value


def config_from_dict(raw: dict) -> ExperimentConfig:
    for section in _MANDATORY_WEIGHTS:
        if section in raw:
            w = raw[section].get("weights", {})
            missing = [k for k in ("lambda1", "lambda2") if k not in w]
            if missing:
                raise ConfigError(f"[{section}.weights] must set {', '.join(missing)} explicitly")
    cfg = _build(ExperimentConfig, raw, "", ExperimentConfig())
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config not found: {path}")
    with open(path, "rb") as f:
        try:
            raw = tomli.load(f)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def _strip_none(d):
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in d.items() if v is not None}
    if isinstance(d, (list, tuple)):
        return [_strip_none(v) for v in d]
    return d


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _strip_none(dataclasses.asdict(cfg))


def dumps_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def write_frozen(cfg: ExperimentConfig, directory: str | Path) -> Path:
    path = Path(directory) / "config.frozen.toml"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_config(cfg))
    return path

