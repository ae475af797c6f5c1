"""Run configuration: strict JSON-backed dataclasses with a stable fingerprint.

A config file is a JSON object whose top-level keys are ``scenario``,
``seed``, ``out_dir`` and the sections ``population``, ``prior``,
``simulation``, ``embed``, ``flow``, ``train``, ``eval`` and ``mcmc``.
Every section is optional and falls back to its defaults; unknown keys
anywhere raise ``ConfigError``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

from ._errors import ConfigError
from .epidemic import Scenario
from .mcmc import MCMCConfig
from .priors import PriorSpec

__all__ = [
    "PopulationConfig",
    "SimulationConfig",
    "EmbedConfig",
    "FlowConfig",
    "TrainConfig",
    "EvalConfig",
    "RunConfig",
    "load_config",
]


@dataclass
class PopulationConfig:
    kind: str = "uniform"          # uniform | clustered | file
    M: int = 500
    side: float = 100.0
    n_clusters: int = 8
    spread: float = 5.0
    path: str | None = None

    def validate(self):
        if self.kind not in ("uniform", "clustered", "file"):
            raise ConfigError(f"population.kind must be uniform, clustered or file, got {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise ConfigError("population.path is required when population.kind = 'file'")
        if self.kind != "file" and self.M < 2:
            raise ConfigError("population.M must be >= 2")
        if self.side <= 0 or self.spread <= 0 or self.n_clusters < 1:
            raise ConfigError("population.side, spread must be positive and n_clusters >= 1")


@dataclass
class SimulationConfig:
    T: int = 40
    n_seeds: int = 3                    # SIR scenarios: size of the fixed seed set
    seed_range: tuple = (5, 10)         # SEIR: per-epidemic seed count range
    removal_length: int = 3

    def validate(self):
        if self.T < 1:
            raise ConfigError("simulation.T must be >= 1")
        if self.n_seeds < 1:
            raise ConfigError("simulation.n_seeds must be >= 1")
        lo, hi = self.seed_range
        if not 1 <= lo <= hi:
            raise ConfigError("simulation.seed_range must satisfy 1 <= lo <= hi")
        if self.removal_length < 1:
            raise ConfigError("simulation.removal_length must be >= 1")


@dataclass
class EmbedConfig:
    kind: str = "cnn"                   # cnn | gnn
    k_emb: int = 32
    knn_k: int = 8
    cnn_channels: tuple = (32, 64, 64)
    cnn_kernel: int = 5
    cnn_pooled: int = 8
    gnn_width: int = 64
    gnn_layers: int = 3

    def validate(self):
        if self.kind not in ("cnn", "gnn"):
            raise ConfigError(f"embed.kind must be cnn or gnn, got {self.kind!r}")
        if self.k_emb < 1 or self.knn_k < 1 or self.cnn_kernel < 1 or self.cnn_pooled < 1:
            raise ConfigError("embed sizes must be positive")
        if not self.cnn_channels or min(self.cnn_channels) < 1 or self.gnn_width < 1 or self.gnn_layers < 0:
            raise ConfigError("embed layer sizes must be positive")


@dataclass
class FlowConfig:
    layers: int = 5
    bins: int = 8
    tail_bound: float = 5.0
    hidden: int = 64

    def validate(self):
        if self.layers < 1 or self.bins < 2 or self.tail_bound <= 0 or self.hidden < 1:
            raise ConfigError("flow needs layers >= 1, bins >= 2, tail_bound > 0, hidden >= 1")


@dataclass
class TrainConfig:
    n_train: int = 20_000
    batch_size: int = 128
    lr: float = 5e-4
    weight_decay: float = 0.0
    max_epochs: int = 200
    patience: int = 10
    val_fraction: float = 0.1

    def validate(self):
        if self.n_train < 1 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("train sizes must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("train.lr must be > 0 and weight_decay >= 0")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("train.val_fraction must lie in (0, 1)")


@dataclass
class EvalConfig:
    n_test: int = 1000
    n_samples: int = 3000
    ppc_draws: int = 100
    level: float = 0.95

    def validate(self):
        if self.n_test < 1 or self.n_samples < 2 or self.ppc_draws < 1:
            raise ConfigError("eval.n_test >= 1, n_samples >= 2 and ppc_draws >= 1 required")
        if not 0 < self.level <= 1:
            raise ConfigError("eval.level must lie in (0, 1]")


_SECTIONS = {
    "population": PopulationConfig,
    "prior": PriorSpec,
    "simulation": SimulationConfig,
    "embed": EmbedConfig,
    "flow": FlowConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "mcmc": MCMCConfig,
}


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name: f for f in fields(cls) if f.init}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        default = known[k].default
        if isinstance(v, list) and (isinstance(default, tuple) or k == "culling_pmf"):
            v = tuple(v)
        kwargs[k] = v
    try:
        obj = cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    for f in fields(cls):
        val = getattr(obj, f.name)
        default = f.default if f.default is not MISSING else None
        if isinstance(default, bool) and not isinstance(val, bool):
            raise ConfigError(f"{where}.{f.name} must be a boolean")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{where}.{f.name} must be a number, got {val!r}")
            if isinstance(default, int) and not isinstance(val, int):
                raise ConfigError(f"{where}.{f.name} must be an integer, got {val!r}")
    return obj


@dataclass
class RunConfig:
    scenario: Scenario = Scenario.FULL
    seed: int = 0
    out_dir: str | None = None
    population: PopulationConfig = field(default_factory=PopulationConfig)
    prior: PriorSpec = field(default_factory=PriorSpec)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    mcmc: MCMCConfig = field(default_factory=MCMCConfig)

    def validate(self) -> "RunConfig":
        try:
            self.scenario = Scenario(self.scenario)
        except ValueError as exc:
            raise ConfigError(f"scenario must be one of full, stoch, partial, seir; got {self.scenario!r}") from exc
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        for name in _SECTIONS:
            section = getattr(self, name)
            if hasattr(section, "validate"):
                section.validate()
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        top = {"scenario", "seed", "out_dir", *_SECTIONS}
        unknown = sorted(set(data) - top)
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
        kwargs = {k: data[k] for k in ("scenario", "seed", "out_dir") if k in data}
        for name, sec_cls in _SECTIONS.items():
            if name in data:
                kwargs[name] = _build(sec_cls, data[name], name)
        return cls(**kwargs).validate()

    def to_dict(self) -> dict:
        out = {"scenario": Scenario(self.scenario).value, "seed": self.seed, "out_dir": self.out_dir}
        for name in _SECTIONS:
            sec = getattr(self, name)
            d = sec.to_dict() if hasattr(sec, "to_dict") else asdict(sec)
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    def fingerprint(self) -> str:
        """sha256 of the canonical JSON form, ignoring ``out_dir``."""
        d = self.to_dict()
        d.pop("out_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return RunConfig.from_dict(data)

