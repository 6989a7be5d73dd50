"""Experiment configuration.

Configs are YAML documents with one mapping per section::

    task: classification          # or regression
    seed: 1388
    data:   {n_total, n_labeled, num_outputs, image_size, n_test, sigma, noise}
    method: {name, ubpl, fd_loss, tau, ema_decay, mt_require_tau}
    loss:   {lambda_ssl, lambda_pse, lambda_fd, beta_fd}
    optim:  {name, lr, momentum, nesterov, weight_decay}
    train:  {epochs, steps_per_epoch, batch_size, mu}
    model:  {widths, kernel}

Unknown keys and wrongly typed values are errors. Fields left as ``null``
take task-dependent defaults when the config is resolved (heatmap runs use
Adam at 0.00025, beta_fd 1, batches of 2 labeled + 2 unlabeled; classification
runs use Nesterov SGD at 0.03, beta_fd 1000, mu 7). The resolved config is
what gets written next to a run, so a snapshot replays exactly.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Union, get_args, get_origin, get_type_hints

import yaml

__all__ = [
    "ConfigError",
    "DataConfig",
    "MethodConfig",
    "LossConfig",
    "OptimConfig",
    "TrainConfig",
    "ModelConfig",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "apply_overrides",
    "dump_config",
    "config_to_dict",
]


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_total: int = 200
    n_labeled: int = 30
    num_outputs: Optional[int] = None  # classes or keypoints
    image_size: int = 16
    n_test: int = 300
    sigma: float = 1.0
    noise: Optional[float] = None


@dataclass
class MethodConfig:
    name: str = "supervised"
    ubpl: bool = False
    fd_loss: bool = True
    tau: float = 0.95
    ema_decay: float = 0.999
    mt_require_tau: bool = True


@dataclass
class LossConfig:
    lambda_ssl: float = 10.0
    lambda_pse: float = 10.0
    lambda_fd: float = 1.0
    beta_fd: Optional[float] = None


@dataclass
class OptimConfig:
    name: Optional[str] = None
    lr: Optional[float] = None
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 0.0


@dataclass
class TrainConfig:
    epochs: int = 30
    steps_per_epoch: int = 50
    batch_size: Optional[int] = None
    mu: Optional[int] = None
    eval_every: int = 1


@dataclass
class ModelConfig:
    widths: Optional[list[int]] = None
    kernel: int = 3


@dataclass
class ExperimentConfig:
    task: str = "classification"
    seed: int = 1388
    data: DataConfig = field(default_factory=DataConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def resolved(self) -> "ExperimentConfig":
        """Copy with task-dependent defaults filled in and cross-field checks applied."""
        cfg = copy.deepcopy(self)
        pose = cfg.task == "regression"
        if cfg.task not in ("classification", "regression"):
            raise ConfigError(f"task must be classification or regression, got {cfg.task!r}")
        if cfg.method.name not in ("supervised", "mean_teacher", "fixmatch", "dualpose"):
            raise ConfigError(f"unknown method {cfg.method.name!r}")
        if cfg.method.name == "fixmatch" and pose:
            raise ConfigError("fixmatch is a classification method; use dualpose or mean_teacher for heatmaps")
        if cfg.method.name == "dualpose" and not pose:
            raise ConfigError("dualpose is a heatmap method")
        if cfg.method.ubpl and cfg.method.name == "supervised":
            raise ConfigError("ubpl needs a semi-supervised method")
        d = cfg.data
        d.num_outputs = d.num_outputs if d.num_outputs is not None else (4 if pose else 10)
        d.noise = d.noise if d.noise is not None else (0.05 if pose else 0.25)
        if not 0 < d.n_labeled <= d.n_total:
            raise ConfigError("need 0 < data.n_labeled <= data.n_total")
        if d.n_labeled == d.n_total and cfg.method.name != "supervised":
            raise ConfigError(f"{cfg.method.name} needs unlabeled data; set data.n_labeled below data.n_total")
        cfg.loss.beta_fd = cfg.loss.beta_fd if cfg.loss.beta_fd is not None else (1.0 if pose else 1000.0)
        o = cfg.optim
        o.name = o.name if o.name is not None else ("adam" if pose else "sgd")
        o.lr = o.lr if o.lr is not None else (0.00025 if o.name == "adam" else 0.03)
        if o.name not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {o.name!r}")
        t = cfg.train
        t.batch_size = t.batch_size if t.batch_size is not None else (2 if pose else 32)
        t.mu = t.mu if t.mu is not None else (1 if pose else 7)
        if cfg.model.widths is None:
            cfg.model.widths = [16, 16, 16, 16] if pose else [8, 16, 32]
        for name in ("lambda_ssl", "lambda_pse", "lambda_fd", "beta_fd"):
            if getattr(cfg.loss, name) < 0:
                raise ConfigError(f"loss.{name} must be non-negative")
        if not 0.0 <= cfg.method.tau <= 1.0:
            raise ConfigError("method.tau must lie in [0, 1]")
        if t.epochs < 1 or t.steps_per_epoch < 1 or t.batch_size < 1 or t.mu < 1:
            raise ConfigError("train sizes must be positive")
        return cfg

    def optimizer_dict(self) -> dict:
        o = self.optim
        if o.name == "adam":
            return {"name": "adam", "lr": o.lr, "weight_decay": o.weight_decay}
        return {"name": "sgd", "lr": o.lr, "momentum": o.momentum, "nesterov": o.nesterov, "weight_decay": o.weight_decay}


def _check_scalar(value, hint, where: str):
    origin = get_origin(hint)
    if origin is Union:
        options = [a for a in get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _check_scalar(value, options[0], where)
    if origin is list:
        (inner,) = get_args(hint)
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return [_check_scalar(v, inner, f"{where}[{i}]") for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported field type {hint}")


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join((where + '.' if where else '') + k for k in unknown)}")
    kwargs = {}
    for name, value in raw.items():
        hint = hints[name]
        key = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(hint):
            kwargs[name] = _build(hint, value or {}, key)
        else:
            kwargs[name] = _check_scalar(value, hint, key)
    return cls(**kwargs)


def parse_config(raw: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, raw or {}, "")


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(yaml.safe_load(fh))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    raw = config_to_dict(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = yaml.safe_load(text)
    return parse_config(raw)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
