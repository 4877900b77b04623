"""Flat experiment configuration.

Config files are flat YAML mappings (``key: value``), one key per field of
:class:`ExperimentConfig`. Values resolve with precedence
command-line flags > environment (``COASTFL_<KEY>``, upper-cased) > file >
defaults. Environment values are parsed as YAML scalars, so
``COASTFL_HIDDEN_DIMS="[32, 16]"`` works.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from coastfl.coast import CLIPS, SELECTIONS, TAIL_POLICIES, VALUATION_MODES, PruneConfig, ValuationConfig
from coastfl.errors import ConfigError
from coastfl.flengine import AggregationMode
from coastfl.model import ModelArch, TrainConfig
from coastfl.synthdata import SETTINGS

ENV_PREFIX = "COASTFL_"
ALL_METHODS = ("coast", "shapley", "loo", "cgsv")
AGGREGATIONS = ("coast_pruned", "plain_fedavg")


@dataclass(frozen=True)
class ExperimentConfig:
    n_clients: int = 5
    n_rounds: int = 60
    k: int = 2
    r: float = 10.0
    alpha: float = 0.02
    setting: str = "quantity"
    aggregation: str = "coast_pruned"
    valuation_mode: str = "parameter_sign"
    tail_policy: str = "truncate"
    selection: str = "by_abs"
    clip: str = "sign_clip"
    height: int = 16
    width: int = 16
    n_classes: int = 4
    hidden_dims: tuple[int, ...] = (64,)
    activation: str = "relu"
    n_train: int = 2000
    n_val: int = 200
    lr0: float = 0.01
    lr_decay: float = 0.99
    batch_size: int = 32
    local_epochs: int = 1
    seed: int = 0
    n_seeds: int = 1
    methods: tuple[str, ...] = ALL_METHODS
    save_logs: bool = True
    out_dir: str = "runs"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "methods", tuple(self.methods))
        problems = validate(self)
        if problems:
            raise ConfigError("invalid experiment config", problems)

    # -- derived component configs --
    @property
    def arch(self) -> ModelArch:
        return ModelArch(self.height * self.width, self.hidden_dims, self.n_classes, self.activation)

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(self.lr0, self.lr_decay, self.batch_size, self.local_epochs)

    @property
    def prune(self) -> PruneConfig:
        return PruneConfig(self.r, self.alpha, self.selection, self.clip)

    @property
    def valuation(self) -> ValuationConfig:
        return ValuationConfig(self.k, self.valuation_mode, self.tail_policy)

    @property
    def mode(self) -> AggregationMode:
        return AggregationMode(self.aggregation, self.prune)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def training_hash(self) -> str:
        """Hash of every field that influences training (not valuation or output)."""
        skip = {"k", "valuation_mode", "tail_policy", "methods", "out_dir", "n_seeds", "save_logs"}
        payload = {k: v for k, v in self.to_dict().items() if k not in skip}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate(cfg: ExperimentConfig) -> list[str]:
    """Every violated constraint, not just the first."""
    p = []

    def need(cond: bool, msg: str):
        if not cond:
            p.append(msg)

    for name in ("n_clients", "n_rounds", "k", "height", "width", "n_classes", "n_train", "n_val",
                 "batch_size", "local_epochs", "seed", "n_seeds"):
        need(_is_int(getattr(cfg, name)), f"{name} must be an integer, got {getattr(cfg, name)!r}")
    for name in ("r", "alpha", "lr0", "lr_decay"):
        need(_is_num(getattr(cfg, name)), f"{name} must be a number, got {getattr(cfg, name)!r}")
    if p:
        return p
    need(cfg.n_clients >= 1, f"n_clients must be >= 1, got {cfg.n_clients}")
    need(cfg.n_rounds >= 1, f"n_rounds must be >= 1, got {cfg.n_rounds}")
    need(cfg.k >= 1, f"k must be >= 1, got {cfg.k}")
    need(0 < cfg.r <= 100, f"r must be in (0, 100], got {cfg.r}")
    need(cfg.alpha > 0, f"alpha must be > 0, got {cfg.alpha}")
    need(cfg.setting in SETTINGS, f"setting must be one of {SETTINGS}, got {cfg.setting!r}")
    need(cfg.aggregation in AGGREGATIONS, f"aggregation must be one of {AGGREGATIONS}, got {cfg.aggregation!r}")
    need(cfg.valuation_mode in VALUATION_MODES, f"valuation_mode must be one of {VALUATION_MODES}")
    need(cfg.tail_policy in TAIL_POLICIES, f"tail_policy must be one of {TAIL_POLICIES}")
    need(cfg.selection in SELECTIONS, f"selection must be one of {SELECTIONS}")
    need(cfg.clip in CLIPS, f"clip must be one of {CLIPS}")
    need(cfg.activation in ("relu", "tanh"), f"activation must be relu or tanh, got {cfg.activation!r}")
    need(cfg.n_classes >= 2, f"n_classes must be >= 2, got {cfg.n_classes}")
    need(cfg.height * cfg.width >= 16, "height * width must be >= 16")
    need(all(h >= 1 for h in cfg.hidden_dims), f"hidden_dims must all be >= 1, got {cfg.hidden_dims}")
    need(cfg.n_val >= cfg.n_classes, f"n_val must be >= n_classes ({cfg.n_classes}), got {cfg.n_val}")
    need(cfg.n_train >= cfg.n_clients, f"n_train must be >= n_clients, got {cfg.n_train}")
    need(cfg.lr0 >= 0, f"lr0 must be >= 0, got {cfg.lr0}")
    need(0 < cfg.lr_decay <= 1, f"lr_decay must be in (0, 1], got {cfg.lr_decay}")
    need(cfg.batch_size >= 1, f"batch_size must be >= 1, got {cfg.batch_size}")
    need(cfg.local_epochs >= 0, f"local_epochs must be >= 0, got {cfg.local_epochs}")
    need(cfg.n_seeds >= 1, f"n_seeds must be >= 1, got {cfg.n_seeds}")
    bad = [m for m in cfg.methods if m not in ALL_METHODS]
    need(not bad, f"methods must be drawn from {ALL_METHODS}, got {bad}")
    need(len(cfg.methods) > 0, "methods must not be empty")
    if cfg.setting == "resolution":
        need(2 * cfg.n_clients + 1 <= min(cfg.height, cfg.width),
             f"resolution setting needs blur kernel {2 * cfg.n_clients + 1} <= image side")
    if {"shapley"} & set(cfg.methods):
        need(cfg.n_clients <= 12, "exact Shapley supports at most 12 clients")
    return p


def _coerce(name: str, value: Any) -> Any:
    kind = _FIELDS[name].type
    if kind in ("tuple[int, ...]", "tuple[str, ...]"):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        elif not isinstance(value, (list, tuple)):
            value = [value]
        return tuple(int(v) for v in value) if "int" in kind else tuple(str(v) for v in value)
    if kind == "float" and _is_int(value):
        return float(value)
    return value


def from_mapping(data: Mapping[str, Any], base: ExperimentConfig | None = None) -> ExperimentConfig:
    unknown = sorted(set(data) - set(_FIELDS))
    if unknown:
        raise ConfigError("unknown config keys", [f"unknown key {k!r}" for k in unknown])
    current = (base or ExperimentConfig()).to_dict()
    current.update({k: _coerce(k, v) for k, v in data.items()})
    current = {k: _coerce(k, v) for k, v in current.items()}
    return ExperimentConfig(**current)


def read_file(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {p}: {exc.strerror or exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: not valid YAML: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: config must be a flat key-value mapping")
    return data


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    out = {}
    for name in _FIELDS:
        key = ENV_PREFIX + name.upper()
        if key in environ:
            out[name] = yaml.safe_load(environ[key])
    return out


def load(
    path: str | Path | None = None,
    flags: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
) -> ExperimentConfig:
    merged: dict[str, Any] = {}
    if path is not None:
        merged.update(read_file(path))
    merged.update(env_overrides(environ))
    merged.update({k: v for k, v in (flags or {}).items() if v is not None})
    return from_mapping(merged)


def dump(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=None)


def save(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dump(cfg), encoding="utf-8")
