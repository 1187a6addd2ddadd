"""Run configuration: dataclasses, JSON loading with validation, overrides.

A config file is a JSON object. Every key is optional; unknown keys are
rejected. Example::

    {
      "regime": "functional",
      "epochs": 20,
      "batch_size": 32,
      "lambda": 1.0,
      "seeds": [0],
      "dataset": {"name": "synthetic_blobs", "num_classes": 2, "num_per_class": 100},
      "model": {"backbone": "small_cnn", "encoder_dim": 64}
    }

``augment`` entries override SimCLR defaults chosen from the dataset's image
size. The JSON key ``lambda`` maps to ``RunConfig.lam``.
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .augment import AugmentPolicy, simclr_policy
from .data import DatasetSpec
from .errors import FKTError, InvalidConfig
from .model import ModelConfig, config_hash

REGIMES = ("representational", "functional", "supervised_only", "ssl_only")


@dataclass
class OptimizerConfig:
    name: str = "sgd"
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 0.0
    trust_coefficient: float = 0.001
    schedule: str = "constant"

    def validate(self, path: str):
        if self.name not in ("sgd", "lars"):
            raise InvalidConfig(f"{path}.name", f"unknown optimizer {self.name!r}")
        if not self.lr > 0:
            raise InvalidConfig(f"{path}.lr", "must be > 0")
        if not 0 <= self.momentum < 1:
            raise InvalidConfig(f"{path}.momentum", "must be in [0, 1)")
        if self.weight_decay < 0:
            raise InvalidConfig(f"{path}.weight_decay", "must be >= 0")
        if not self.trust_coefficient > 0:
            raise InvalidConfig(f"{path}.trust_coefficient", "must be > 0")
        if self.schedule not in ("constant", "cosine"):
            raise InvalidConfig(f"{path}.schedule", "must be 'constant' or 'cosine'")


def _lars_defaults():
    # trust 1.0 makes lr the per-step relative update size; 0.001 with lr 0.001 barely moves the weights
    return OptimizerConfig(name="lars", lr=0.001, momentum=0.9, weight_decay=1e-6, trust_coefficient=1.0)


@dataclass
class RunConfig:
    regime: str = "functional"
    epochs: int = 100
    # representational regime only; defaults to ``epochs``
    pretrain_epochs: Optional[int] = None
    batch_size: int = 256
    eval_batch_size: int = 256
    lam: float = 1.0
    temperature: float = 0.5
    ssl_optimizer: OptimizerConfig = field(default_factory=_lars_defaults)
    supervised_optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    joint_optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    trials: int = 3
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    freeze_encoder: bool = False
    # "light" (crop + flip) or "ssl" (the full contrastive policy) for supervised-only training
    supervised_augment: str = "light"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    determinism: bool = True
    device: str = "cpu"
    checkpoint_every: int = 0
    workers: int = 0
    output_dir: str = "runs"

    def validate(self):
        if self.regime not in REGIMES:
            raise InvalidConfig("regime", f"must be one of {REGIMES}, got {self.regime!r}")
        if self.epochs < 1:
            raise InvalidConfig("epochs", "must be >= 1")
        if self.pretrain_epochs is not None and self.pretrain_epochs < 1:
            raise InvalidConfig("pretrain_epochs", "must be >= 1")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size", "must be >= 1")
        if self.eval_batch_size < 1:
            raise InvalidConfig("eval_batch_size", "must be >= 1")
        if not self.lam >= 0:
            raise InvalidConfig("lambda", f"must be >= 0, got {self.lam}")
        if not self.temperature > 0:
            raise InvalidConfig("temperature", "must be > 0")
        for name in ("ssl_optimizer", "supervised_optimizer", "joint_optimizer"):
            getattr(self, name).validate(name)
        if self.trials != len(self.seeds):
            raise InvalidConfig("seeds", f"trials={self.trials} but {len(self.seeds)} seeds given")
        if len(set(self.seeds)) != len(self.seeds):
            raise InvalidConfig("seeds", "seeds must be distinct")
        if self.supervised_augment not in ("light", "ssl"):
            raise InvalidConfig("supervised_augment", "must be 'light' or 'ssl'")
        if self.model.num_classes != self.dataset.num_classes:
            raise InvalidConfig("model.num_classes",
                                f"{self.model.num_classes} does not match dataset ({self.dataset.num_classes})")
        if self.device not in ("cpu", "gpu", "cuda"):
            raise InvalidConfig("device", "must be 'cpu' or 'gpu'")
        if self.checkpoint_every < 0:
            raise InvalidConfig("checkpoint_every", "must be >= 0")
        if self.workers < 0:
            raise InvalidConfig("workers", "must be >= 0")
        return self

    @property
    def stage_epochs(self) -> tuple:
        """Epoch budget per stage, e.g. (100, 100) for representational transfer."""
        if self.regime == "representational":
            return (self.pretrain_epochs or self.epochs, self.epochs)
        return (self.epochs,)

    @property
    def epochs_total(self) -> int:
        return sum(self.stage_epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        for key in ("crop_scale_range", "normalization_mean", "normalization_std"):
            if d["augment"][key] is not None:
                d["augment"][key] = list(d["augment"][key])
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())


# ---------------------------------------------------------------- parsing

def _check_type(value, hint, path: str):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return value
        hint = next(a for a in args if a is not type(None))
        origin = typing.get_origin(hint)
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif hint is str:
        ok = isinstance(value, str)
    elif hint in (list, tuple) or origin in (list, tuple):
        ok = isinstance(value, (list, tuple))
        value = tuple(value) if ok and (hint is tuple or origin is tuple) else value
        value = list(value) if ok and (hint is list or origin is list) else value
    elif hint is dict:
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        name = getattr(hint, "__name__", str(hint))
        raise InvalidConfig(path, f"expected {name}, got {type(value).__name__} {value!r}")
    return value


def _build(cls, data: dict, prefix: str, defaults: Optional[dict] = None):
    if not isinstance(data, dict):
        raise InvalidConfig(prefix or "<root>", "expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise InvalidConfig(f"{prefix}{unknown[0]}", "unknown key")
    kwargs = dict(defaults or {})
    for key, value in data.items():
        kwargs[key] = _check_type(value, hints[key], f"{prefix}{key}")
    try:
        return cls(**kwargs)
    except InvalidConfig:
        raise
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(prefix.rstrip(".") or "<root>", str(exc)) from exc


def config_from_dict(raw: dict) -> RunConfig:
    """Validate and build a RunConfig from a parsed JSON object."""
    if not isinstance(raw, dict):
        raise InvalidConfig("<root>", "config must be a JSON object")
    raw = dict(raw)
    if "lam" in raw:
        raise InvalidConfig("lam", "unknown key (use 'lambda')")
    if "lambda" in raw:
        raw["lam"] = raw.pop("lambda")

    dataset = _build(DatasetSpec, raw.pop("dataset", {}), "dataset.")
    model = _build(ModelConfig, raw.pop("model", {}), "model.", {"num_classes": dataset.num_classes})
    augment_raw = raw.pop("augment", {})
    if not isinstance(augment_raw, dict):
        raise InvalidConfig("augment", "expected an object")
    base = simclr_policy(dataset.image_size)
    augment = _build(AugmentPolicy, augment_raw, "augment.", asdict(base))
    optimizers = {}
    for name, default in (("ssl_optimizer", _lars_defaults()), ("supervised_optimizer", OptimizerConfig()),
                          ("joint_optimizer", OptimizerConfig())):
        optimizers[name] = _build(OptimizerConfig, raw.pop(name, {}), f"{name}.", asdict(default))

    if "seeds" in raw and "trials" not in raw and isinstance(raw["seeds"], list):
        raw["trials"] = len(raw["seeds"])
    if "trials" in raw and "seeds" not in raw and isinstance(raw["trials"], int):
        raw["seeds"] = list(range(raw["trials"]))
    cfg = _build(RunConfig, raw, "", dict(dataset=dataset, model=model, augment=augment, **optimizers))
    try:
        return cfg.validate()
    except InvalidConfig:
        raise
    except FKTError as exc:
        raise InvalidConfig("<root>", str(exc)) from exc


def parse_override(text: str) -> tuple:
    """``'a.b=value'`` -> (['a', 'b'], value); value parsed as JSON when possible."""
    if "=" not in text:
        raise InvalidConfig(text, "override must look like key.path=value")
    key, value = text.split("=", 1)
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    return key.strip().split("."), parsed


def apply_overrides(raw: dict, overrides) -> dict:
    raw = json.loads(json.dumps(raw))
    for text in overrides or ():
        path, value = parse_override(text)
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise InvalidConfig(".".join(path), "cannot descend into a non-object")
        node[path[-1]] = value
    return raw


def read_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise InvalidConfig(str(path), "config file not found") from None
    except json.JSONDecodeError as exc:
        raise InvalidConfig(str(path), f"invalid JSON: {exc}") from None
    return config_from_dict(apply_overrides(raw, overrides))


def with_normalization(cfg: RunConfig, mean, std) -> RunConfig:
    """Copy of ``cfg`` whose augment policy carries the given per-channel statistics."""
    augment = dataclasses.replace(cfg.augment, normalization_mean=tuple(mean), normalization_std=tuple(std))
    return dataclasses.replace(cfg, augment=augment)
