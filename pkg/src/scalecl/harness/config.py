"""Declarative experiment configuration, YAML/JSON loading and dotted overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from ..losses import LossConfig
from ..merging import MergeConfig
from ..training import OptimConfig
from .data import StreamSpec

SETTINGS = ("TIL", "CIL", "CPT")
SELECTIONS = ("current", "seen", "last")


class ConfigError(ValueError):
    pass


@dataclass
class LoraConfig:
    enabled: bool = False
    rank: int = 8
    targets: list[str] | None = None
    # phases that get a fresh adapter set: task and/or consolidation
    phases: list[str] = field(default_factory=lambda: ["task", "consolidation"])


@dataclass
class PretrainConfig:
    epochs: int = 15
    lr: float = 0.05
    batch_size: int = 64
    warmup_epochs: int = 1
    accuracy_floor: float = 0.80


@dataclass
class BufferConfig:
    capacity: int = 20
    window: int = 4000
    auto_window: bool = True


@dataclass
class ProbeConfig:
    max_iter: int = 300
    l2: float = 1e-4
    tol: float = 1e-7


@dataclass
class ExperimentConfig:
    name: str = "run"
    setting: str = "CIL"
    stream: StreamSpec = field(default_factory=StreamSpec)
    hidden_dims: list[int] = field(default_factory=lambda: [64, 64])
    rr: float = 1.0
    csr: float = 0.0
    consolidate_every_k_tasks: int = 1
    consolidation_chunks: int = 4
    consolidation_lr: float | None = 0.01  # None: same peak as the task phase
    merge: MergeConfig = field(default_factory=MergeConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    buffer: BufferConfig = field(default_factory=BufferConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    epochs: int = 8
    warmup_epochs: int = 3
    batch_size: int = 32
    retrieval: str = "class"
    pt_weight: float = 1.0
    head_init_scale: float = 0.01
    # validation set for picking the best post-epoch checkpoint: "current" task or all "seen" tasks
    selection: str = "last"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}")
        if self.rr < 0:
            raise ConfigError("rr must be >= 0")
        if not 0.0 <= self.csr <= 1.0:
            raise ConfigError("csr must lie in [0, 1]")
        if self.retrieval not in ("class", "task"):
            raise ConfigError("retrieval must be 'class' or 'task'")
        if self.epochs < 1 or not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError("need epochs >= 1 and 0 <= warmup_epochs <= epochs")
        if self.selection not in SELECTIONS:
            raise ConfigError(f"selection must be one of {SELECTIONS}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.consolidate_every_k_tasks < 1:
            raise ConfigError("consolidate_every_k_tasks must be >= 1")
        if self.setting == "CIL" and self.merge.strategy == "parallel" and "pt" in self.merge.parallel_replay:
            raise ConfigError("CIL has no pre-training replay; use parallel_replay none or tasks")
        if self.setting == "CPT" and self.merge.parallel_replay == "tasks" and self.merge.strategy == "parallel":
            raise ConfigError("CPT parallel replay must be none, pt or pt+tasks")

    @property
    def strategy(self) -> str:
        return self.merge.strategy

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **overrides) -> "ExperimentConfig":
        d = self.to_dict()
        for key, value in overrides.items():
            set_dotted(d, key, value)
        return from_dict(d)


_NESTED = {
    "stream": StreamSpec,
    "merge": MergeConfig,
    "lora": LoraConfig,
    "loss": LossConfig,
    "optim": OptimConfig,
    "pretrain": PretrainConfig,
    "buffer": BufferConfig,
    "probe": ProbeConfig,
}


def _build(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**data)


def from_dict(data: dict[str, Any]) -> ExperimentConfig:
    data = copy.deepcopy(dict(data))
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED and isinstance(value, dict):
            kwargs[key] = _build(_NESTED[key], value)
        else:
            kwargs[key] = value
    try:
        return _build(ExperimentConfig, kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def set_dotted(d: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        if p not in cur or not isinstance(cur[p], dict):
            raise ConfigError(f"unknown config section {key!r}")
        cur = cur[p]
    if parts[-1] not in cur:
        raise ConfigError(f"unknown config field {key!r}")
    cur[parts[-1]] = value


def parse_override(text: str) -> tuple[str, Any]:
    """``key.sub=value`` with the value parsed as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> ExperimentConfig:
    d = ExperimentConfig().to_dict()
    if path is not None:
        text = Path(path).read_text()
        loaded = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
        _deep_update(d, loaded or {})
    for item in overrides or []:
        key, value = parse_override(item)
        set_dotted(d, key, value)
    return from_dict(d)


def _deep_update(base: dict, new: dict) -> None:
    for k, v in new.items():
        if k not in base:
            raise ConfigError(f"unknown config field {k!r}")
        if isinstance(v, dict) and isinstance(base[k], dict):
            _deep_update(base[k], v)
        else:
            base[k] = v


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)


def is_config(obj) -> bool:
    return is_dataclass(obj) and isinstance(obj, ExperimentConfig)
