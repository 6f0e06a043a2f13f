"""INI experiment configuration with flag-over-file precedence.

Sections map onto config dataclasses::

    [dataset]         DatasetConfig
    [arch]            ArchConfig
    [pretrain]        PretrainConfig
    [train]           TrainConfig scalars
    [train.loss]      LossConfig
    [train.sampling]  SamplingConfig
    [train.smooth]    SmoothConfig
    [train.rpl]       RplConfig

Values are parsed as JSON when possible (``0.05``, ``true``, ``[0.1, 0.5]``)
and kept as strings otherwise.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .errors import ConfigError
from .segnet import ArchConfig, PretrainConfig
from .synthdata import DatasetConfig
from .training import TrainConfig

SECTIONS = ("dataset", "arch", "pretrain", "train", "train.loss", "train.sampling", "train.smooth", "train.rpl")


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "arch": self.arch.to_dict(),
            "pretrain": dataclasses.asdict(self.pretrain),
            "train": self.train.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {"dataset", "arch", "pretrain", "train"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            return cls(
                dataset=DatasetConfig.from_dict(d.get("dataset", {})),
                arch=ArchConfig.from_dict(d.get("arch", {})),
                pretrain=PretrainConfig(**d.get("pretrain", {})),
                train=TrainConfig.from_dict(d.get("train", {})),
            )
        except TypeError as exc:  # unexpected keyword in a dataclass constructor
            raise ConfigError(str(exc)) from exc


def read_ini(path: str | Path) -> dict:
    """Nested dict from an INI file; ``[train.loss]`` lands under ``d["train"]["loss"]``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    out: dict = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}] in {path}")
        values = {k: parse_value(v) for k, v in parser.items(section)}
        _set_path(out, section.split("."), values, merge=True)
    return out


def write_ini(cfg: ExperimentConfig, path: str | Path) -> Path:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    d = cfg.to_dict()
    for section in SECTIONS:
        node = d
        for part in section.split("."):
            node = node[part]
        parser[section] = {k: json.dumps(v) for k, v in node.items() if not isinstance(v, dict)}
    path = Path(path)
    with open(path, "w") as fh:
        parser.write(fh)
    return path


def parse_overrides(items: Iterable[str]) -> dict:
    """``["train.lr=0.01", "train.loss.alpha=0.1"]`` -> nested dict."""
    out: dict = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) < 2:
            raise ConfigError(f"override key {key!r} needs a section prefix")
        _set_path(out, parts, parse_value(value.strip()))
    return out


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the file, then flag overrides (flags win)."""
    d = read_ini(path) if path is not None else {}
    if overrides:
        d = merge(d, overrides)
    return ExperimentConfig.from_dict(d)


def _set_path(d: dict, parts: list[str], value, merge: bool = False) -> None:
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    if merge and isinstance(value, dict):
        d.setdefault(parts[-1], {}).update(value)
    else:
        d[parts[-1]] = value
