"""Seeded benchmark runs: burn-in once, then continue under several strategies.

The burned-in state is shared so every strategy starts from the same weights.
Strategies with an EMA teacher are scored on the teacher; the supervised
continuation (``none``) is scored on the student.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

from .data import DataConfig, SyntheticDataset, generate_synthetic
from .model import ModelConfig
from .trainer import ClipSource, SSADConfig, TrainConfig, TrainState, burn_in, evaluate, run_ssad


def _bench_train() -> TrainConfig:
    return TrainConfig(iterations=1200)


def _bench_ssad() -> SSADConfig:
    # the teacher horizon 1 / (1 - m) is scaled with the shortened schedule
    return SSADConfig(iterations=500, ema_decay=0.99)


@dataclass
class BenchmarkConfig:
    """Desk-scale schedule: every seed runs a burn-in and four continuations
    within about 12 minutes on one CPU core."""

    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=_bench_train)
    ssad: SSADConfig = field(default_factory=_bench_ssad)


@dataclass
class Prepared:
    dataset: SyntheticDataset
    train: ClipSource
    test: ClipSource


def prepare(cfg: BenchmarkConfig, seed: int) -> Prepared:
    ds = generate_synthetic(cfg.data, seed)
    return Prepared(ds, ClipSource(ds.videos, ds.train, cfg.model.frames), ClipSource(ds.videos, ds.test, cfg.model.frames))


def run_burn_in(cfg: BenchmarkConfig, data: Prepared, seed: int, **train_overrides) -> tuple[TrainState, float]:
    tcfg = dataclasses.replace(cfg.train, **train_overrides)
    state = burn_in(data.train, tcfg, cfg.model, seed)
    return state, evaluate(state.student, data.test).map


def run_strategy(cfg: BenchmarkConfig, data: Prepared, state: TrainState, strategy: str, **ssad_overrides) -> float:
    scfg = dataclasses.replace(cfg.ssad, strategy=strategy, **ssad_overrides)
    out = run_ssad(state, data.train, cfg.train, scfg)
    model = out.student if strategy == "none" else out.teacher
    return evaluate(model, data.test).map


def run_benchmark(cfg: BenchmarkConfig, seed: int, strategies=("none", "ema", "hard", "tla")) -> dict:
    """frame-mAP after burn-in and after each strategy, plus wall-clock seconds."""
    t0 = time.time()
    data = prepare(cfg, seed)
    state, burn_map = run_burn_in(cfg, data, seed)
    out = {"burn_in": burn_map}
    for s in strategies:
        out[s] = run_strategy(cfg, data, state, s)
    out["seconds"] = time.time() - t0
    return out
