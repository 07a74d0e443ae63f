"""Flat INI-style experiment configuration.

Sections map onto the dataclasses of each stage::

    [dataset]   -> DataConfig
    [model]     -> ModelConfig
    [train]     -> TrainConfig (burn-in + shared loss settings)
    [ssad]      -> SSADConfig
    [eval]      -> EvalConfig
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field

from .data import DataConfig
from .model import ModelConfig
from .trainer import SSADConfig, TrainConfig


@dataclass
class EvalConfig:
    score_thresh: float = 0.4
    nms_iou: float = 0.3
    max_actors: int = 10
    action_thresh: float = 0.002
    iou_thresh: float = 0.5


@dataclass
class ExperimentConfig:
    dataset: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ssad: SSADConfig = field(default_factory=SSADConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


SECTIONS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _parse(value: str, default):
    if isinstance(default, bool):
        low = value.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {value!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, tuple):
        parts = [p.strip() for p in value.split(",") if p.strip()]
        kind = type(default[0]) if default else float
        return tuple(kind(p) for p in parts)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value.strip()


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


def parse_config(text: str) -> ExperimentConfig:
    """Unknown sections or keys are errors; missing keys keep defaults."""
    cp = configparser.ConfigParser()
    cp.read_string(text)
    cfg = ExperimentConfig()
    for section in cp.sections():
        if section not in SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        obj = getattr(cfg, section)
        names = {f.name for f in dataclasses.fields(obj)}
        for key, value in cp.items(section):
            if key not in names:
                raise ValueError(f"unknown key {key!r} in [{section}]")
            setattr(obj, key, _parse(value, getattr(obj, key)))
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser()
    for name in SECTIONS:
        obj = getattr(cfg, name)
        cp[name] = {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
