"""Run configuration: one JSON file plus ``key=value`` overrides."""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Optional, Sequence

from .detection import LossWeights
from .model import ModelConfig
from .msffm import PaConvConfig
from .prior_dcn import SdfprConfig
from .transformer import STRATEGIES


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    train: Optional[str] = None          # annotations path; None -> generate
    test: Optional[str] = None
    n_train: int = 200
    n_test: int = 50
    speckle: float = 0.3
    blur: float = 1.0
    shadow_prob: float = 0.3
    seed: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)
    lr: float = 1e-4
    weight_decay: float = 1e-4
    clip_norm: Optional[float] = 0.1
    epochs: int = 50
    lr_drop: Optional[int] = None        # epoch at which lr is divided by 10
    batch_size: int = 2
    seed: int = 0
    aux_loss: bool = True
    hflip: bool = True
    prior: Optional[str] = None          # prior JSON; None -> fit on training boxes
    prior_components: int = 3
    eval_every: int = 1
    out_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        if self.model.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.model.strategy!r}")
        for name in ("lr", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.model.num_queries < 1:
            raise ConfigError("model.num_queries must be >= 1")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_NESTED = {
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "loss"): LossWeights,
    (RunConfig, "data"): DataConfig,
    (ModelConfig, "sdfpr"): SdfprConfig,
    (ModelConfig, "paconv"): PaConvConfig,
}


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(d).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(where + k for k in unknown)}")
    kw = {}
    for k, v in d.items():
        sub = _NESTED.get((cls, k))
        if sub is not None:
            kw[k] = _build(sub, v, f"{where}{k}.")
        elif k == "widths":
            kw[k] = tuple(v)
        else:
            kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def from_dict(d: dict) -> RunConfig:
    return _build(RunConfig, d, "").validate()


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides: Sequence[str]) -> dict:
    """``a.b=value`` pairs; values are parsed as JSON when possible."""
    d = copy.deepcopy(d)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
        node[parts[-1]] = _parse_value(text)
    return d


def load(path: Optional[str] = None, overrides: Sequence[str] = ()) -> RunConfig:
    d: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                d = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(apply_overrides(d, overrides))
