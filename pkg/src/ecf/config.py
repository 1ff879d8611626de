"""Run configuration read from an INI file.

Example::

    [data]
    interactions = ml-1m/interactions.tsv
    item_tags = ml-1m/item_tags.tsv
    prepared_dir = work/ml-1m

    [train]
    num_clusters = 64
    lr = 0.001

    [explainability]
    size_threshold = 10

Every key has a default; unknown sections or keys are rejected so a typo
cannot silently fall back to a default.
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .trainer import TrainConfig


class ConfigError(ValueError):
    """Malformed, unknown or missing configuration entry."""


@dataclass
class DataConfig:
    interactions: str = ""
    item_tags: str = ""
    prepared_dir: str = ""
    kcore: int = 10
    min_tag_items: int = 10
    split: str = "0.8,0.1,0.1"

    def ratios(self) -> tuple[float, ...]:
        try:
            values = tuple(float(x) for x in self.split.split(","))
        except ValueError:
            raise ConfigError(f"data.split: expected comma-separated numbers, got {self.split!r}") from None
        if len(values) != 3 or abs(sum(values) - 1.0) > 1e-9:
            raise ConfigError(f"data.split: need three ratios summing to 1, got {self.split!r}")
        return values


@dataclass
class ExplainabilityConfig:
    size_threshold: int = 10
    # 0 means the mean size of the learned clusters
    random_size: int = 0
    discriminator_lr: float = 3e-3


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    explainability: ExplainabilityConfig = field(default_factory=ExplainabilityConfig)
    forest_size: int = 9

    def require(self, section: str, key: str) -> str:
        value = getattr(getattr(self, section), key)
        if value in ("", None):
            raise ConfigError(f"missing config key '{section}.{key}'")
        return value


def _convert(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            return {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}[raw.lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"{section}.{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _fill(obj, section: str, items) -> None:
    known = {f.name for f in fields(obj)}
    for key, raw in items:
        if key not in known:
            raise ConfigError(f"unknown config key '{section}.{key}'")
        setattr(obj, key, _convert(section, key, raw, getattr(obj, key)))


def load_config(path=None) -> RunConfig:
    """Defaults overlaid with the file at ``path`` (if any)."""
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such config file")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from None
    for section in parser.sections():
        items = parser.items(section)
        if section == "data":
            _fill(cfg.data, section, items)
        elif section == "train":
            forest = [(k, v) for k, v in items if k == "forest_size"]
            if forest:
                cfg.forest_size = _convert(section, "forest_size", forest[0][1], cfg.forest_size)
            _fill(cfg.train, section, [(k, v) for k, v in items if k != "forest_size"])
        elif section == "explainability":
            _fill(cfg.explainability, section, items)
        else:
            raise ConfigError(f"unknown config section '[{section}]'")
    try:
        cfg.train.validate()
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None
    if cfg.forest_size < 1:
        raise ConfigError("train.forest_size must be positive")
    return cfg
