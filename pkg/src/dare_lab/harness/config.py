"""Experiment configuration: one JSON document with five sections."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from dare_lab.errors import ConfigError
from dare_lab.estimators import SnisConfig
from dare_lab.trainer import TierConfig
from dare_lab.world import WorldConfig

log = logging.getLogger(__name__)

METHODS = ("snis", "random", "prev_fr", "coldstart", "bayes", "entropy", "current_fr")
SAMPLER_MODES = ("auto", "beta", "entropy_softmax", "uniform")


@dataclass
class BufferSection:
    k_cap: int = 8
    c: int = 4096


@dataclass
class EstimatorSection:
    method: str = "snis"
    clip: float = 4.0
    tau: float = 3.0
    delta: float = 0.05
    b_min: float | None = None
    reference_g: int = 8
    coldstart_sharpness: float = 1.0
    bayes_alpha0: float = 1.0
    bayes_beta0: float = 1.0
    bayes_decay: float = 0.5
    entropy_l_prefix: int = 4
    current_fr_g: int = 8
    bench_methods: list[str] = field(default_factory=lambda: list(METHODS))
    tau_sweep: list[float] = field(default_factory=list)

    def snis(self) -> SnisConfig:
        return SnisConfig(clip=self.clip, tau=self.tau, delta=self.delta, b_min=self.b_min)


@dataclass
class SamplerSection:
    kappa: float = 100.0
    batch_size: int = 8
    sampler_mode: str = "auto"
    tau_ent: float = 1.0


@dataclass
class DriftSection:
    start: int = -1
    every: int = 0
    scale: float = 0.0
    skill_scale: float = 0.0

    def active(self, step: int) -> bool:
        if self.start < 0 or step < self.start:
            return False
        if step == self.start:
            return True
        return self.every > 0 and (step - self.start) % self.every == 0


@dataclass
class BoundSection:
    replications: int = 1000
    k: int = 512
    clip: float = 0.6931471805599453
    delta: float = 0.05
    drift_scale: float = 0.3
    prompt_id: int | None = None
    b_min: float | None = None


@dataclass
class RunSection:
    n_steps: int = 200
    eval_every: int = 10
    eval_set_size: int = 64
    seed: int = 0
    output_dir: str = "runs/default"
    estimate_stride: int = 1
    label: str = ""
    drift: DriftSection = field(default_factory=DriftSection)
    bound: BoundSection = field(default_factory=BoundSection)
    snapshot_buffer: bool = True
    fill_shortfall: bool = True


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    buffer: BufferSection = field(default_factory=BufferSection)
    estimator: EstimatorSection = field(default_factory=EstimatorSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    trainer: TierConfig = field(default_factory=TierConfig)
    run: RunSection = field(default_factory=RunSection)

    @property
    def label(self) -> str:
        return self.run.label or self.estimator.method

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["world"]["family_weights"] = list(self.world.family_weights)
        return d

    def resolved_sampler_mode(self) -> str:
        mode = self.sampler.sampler_mode
        if mode != "auto":
            return mode
        return {"random": "uniform", "entropy": "entropy_softmax"}.get(self.estimator.method, "beta")

    def validate(self) -> None:
        self.world.validate()
        e = self.estimator
        if e.method not in METHODS:
            raise ConfigError("estimator.method", f"unknown method {e.method!r}; choose from {METHODS}")
        for m in e.bench_methods:
            if m not in METHODS:
                raise ConfigError("estimator.bench_methods", f"unknown method {m!r}")
        try:
            e.snis()
        except ValueError as exc:
            raise ConfigError("estimator", str(exc)) from None
        if not e.coldstart_sharpness > 0:
            raise ConfigError("estimator.coldstart_sharpness", "must be positive")
        if e.tau > self.buffer.k_cap:
            raise ConfigError("estimator.tau", f"ESS threshold {e.tau} exceeds buffer.k_cap {self.buffer.k_cap}")
        if self.buffer.k_cap < 1 or self.buffer.c < 1:
            raise ConfigError("buffer", "capacities must be positive")
        if self.sampler.sampler_mode not in SAMPLER_MODES:
            raise ConfigError("sampler.sampler_mode", f"unknown mode {self.sampler.sampler_mode!r}")
        if self.sampler.kappa < 0:
            raise ConfigError("sampler.kappa", "must be non-negative")
        if not 1 <= self.sampler.batch_size <= self.world.n_prompts:
            raise ConfigError("sampler.batch_size", "must lie in [1, n_prompts]")
        try:
            self.trainer.validate(self.world.t_max)
        except ValueError as exc:
            raise ConfigError("trainer", str(exc)) from None
        if self.trainer.g_hard > 2 * self.buffer.k_cap:
            log.warning("trainer.g_hard=%d exceeds 2*buffer.k_cap", self.trainer.g_hard)
        r = self.run
        if r.n_steps < 0:
            raise ConfigError("run.n_steps", "must be non-negative")
        if r.eval_every < 1:
            raise ConfigError("run.eval_every", "must be >= 1")
        if r.eval_set_size < 1:
            raise ConfigError("run.eval_set_size", "must be >= 1")
        if r.estimate_stride < 1:
            raise ConfigError("run.estimate_stride", "must be >= 1")
        if not 0 <= r.seed < 2**64:
            raise ConfigError("run.seed", "must be an unsigned 64-bit integer")


_SECTIONS = {
    "world": WorldConfig,
    "buffer": BufferSection,
    "estimator": EstimatorSection,
    "sampler": SamplerSection,
    "trainer": TierConfig,
    "run": RunSection,
}
_NESTED = {("run", "drift"): DriftSection, ("run", "bound"): BoundSection}


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(where, "must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"{where}.{key}", "unknown key")
        nested = _NESTED.get((where, key))
        kwargs[key] = _build(nested, value, f"{where}.{key}") if nested else copy.deepcopy(value)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(where, str(exc)) from None


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for key in data:
        if key not in _SECTIONS:
            raise ConfigError(key, "unknown section")
    sections = {name: _build(cls, data.get(name, {}), name) for name, cls in _SECTIONS.items()}
    # the held-out pool always matches the evaluation set size
    sections["world"].n_heldout = sections["run"].eval_set_size
    # unless pinned explicitly, each run seed gets its own world
    if "seed" not in (data.get("world") or {}):
        sections["world"].seed = sections["run"].seed
    cfg = ExperimentConfig(**sections)
    cfg.validate()
    return cfg


def load_config(path: str | Path, seed: int | None = None) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("--config", f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"{p}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if seed is not None:
        data.setdefault("run", {})["seed"] = int(seed)
    return config_from_dict(data)
