"""Hierarchical run configuration (YAML) with dotted ``key=value`` overrides.

Sections::

    world:      WorldConfig fields
    data:       n_wafers, seed, knn_k, systematic_threshold
    split:      mode, holdout, seed
    train:      TrainConfig fields (without the loss)
    loss:       LossConfig fields
    experiment: seeds, splits (name -> holdout values), gradcheck_seeds

Unknown sections or keys raise :class:`ConfigError`.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, fields

import yaml

from .errors import ConfigError
from .harness.train import TrainConfig
from .losses import LossConfig
from .synthgen import WorldConfig

DEFAULT_SPLITS = {
    "by_product_type": ["PROD01", "PROD06", "PROD11"],
    "by_product_group": ["GRP02"],
}


def _defaults() -> dict:
    train = asdict(TrainConfig())
    train.pop("loss")
    return {
        "world": asdict(WorldConfig()),
        "data": {"n_wafers": 2000, "seed": 0, "knn_k": 5, "systematic_threshold": 0.95},
        "split": {"mode": "standard", "holdout": 0.2, "seed": 0},
        "train": train,
        "loss": asdict(LossConfig()),
        "experiment": {"seeds": [0, 1, 2], "splits": copy.deepcopy(DEFAULT_SPLITS),
                       "gradcheck_seeds": 1},
    }


def _as_plain(value):
    if isinstance(value, tuple):
        return [_as_plain(v) for v in value]
    if isinstance(value, list):
        return [_as_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _as_plain(v) for k, v in value.items()}
    return value


def _merge(base: dict, update: dict, path: str = "") -> None:
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "splits":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            _merge(base[key], value, where + ".")
        else:
            base[key] = value


class RunConfig:
    """Resolved configuration; ``data`` holds the plain nested dict."""

    def __init__(self, data: dict | None = None):
        self.data = _defaults()
        if data:
            _merge(self.data, data)
        self.data = _as_plain(self.data)
        self.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping at top level")
        return cls(raw)

    def override(self, assignments) -> "RunConfig":
        """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
        data = copy.deepcopy(self.data)
        for item in assignments or ():
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            parts = key.strip().split(".")
            node = data
            for p in parts[:-1]:
                if not isinstance(node, dict) or p not in node:
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if not isinstance(node, dict) or parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                node[parts[-1]] = yaml.safe_load(raw)
            except yaml.YAMLError:
                raise ConfigError(f"cannot parse value of {key!r}: {raw!r}") from None
        return RunConfig(data)

    def validate(self) -> None:
        # building the typed configs runs their own checks
        self.world()
        self.train_config()
        d = self.data
        if d["data"]["n_wafers"] < 1 or d["data"]["knn_k"] < 1:
            raise ConfigError("data.n_wafers and data.knn_k must be positive")
        if d["split"]["mode"] not in ("standard", "by_product_type", "by_product_group"):
            raise ConfigError(f"unknown split mode {d['split']['mode']!r}")
        if not d["experiment"]["seeds"]:
            raise ConfigError("experiment.seeds must not be empty")

    def world(self) -> WorldConfig:
        return _build(WorldConfig, self.data["world"], "world")

    def loss_config(self) -> LossConfig:
        return _build(LossConfig, self.data["loss"], "loss")

    def train_config(self) -> TrainConfig:
        cfg = _build(TrainConfig, dict(self.data["train"], loss=None), "train")
        cfg.loss = self.loss_config()
        return cfg

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.data, sort_keys=True)

    def fingerprint(self, *extra) -> str:
        blob = json.dumps([self.data, list(extra)], sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def _build(cls, values: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section}: {sorted(unknown)}")
    kwargs = {k: v for k, v in values.items() if v is not None or k == "loss"}
    if cls is TrainConfig:
        kwargs.pop("loss", None)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad {section} config: {exc}") from None
