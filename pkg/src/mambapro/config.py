"""Experiment configuration: strict JSON parsing and canonical hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


class UsageError(ValueError):
    """Invalid command-line or configuration input."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def _strict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise UsageError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise UsageError(f"{where}: unknown key {key!r}")
    return cls(**data)


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "interleaved"
    num_classes: int = 2
    train_size: int = 320
    val_size: int = 512
    noise: float = 0.3

    def __post_init__(self):
        if self.kind not in ("interleaved", "prefix-majority", "uniform-noise"):
            raise UsageError(f"task.kind: unknown generator {self.kind!r}")


@dataclass(frozen=True)
class OptimSpec:
    lr: float = 3e-3
    epochs: int = 10
    warmup_epochs: int = 1
    batch_size: int = 16
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class ExperimentConfig:
    subcommand: str = "train"
    preset: str = "tiny-shrunk"
    model: dict = field(default_factory=dict)   # overrides applied to the preset
    task: TaskSpec = field(default_factory=TaskSpec)
    optim: OptimSpec = field(default_factory=OptimSpec)
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs/out"
    mask: bool = True
    residual: bool = True
    cases: int = 1000

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        if "task" in data:
            data["task"] = _strict(TaskSpec, data["task"], "task")
        if "optim" in data:
            data["optim"] = _strict(OptimSpec, data["optim"], "optim")
        cfg = _strict(cls, data, "config")
        if not isinstance(cfg.model, dict):
            raise UsageError("model: expected an object of preset overrides")
        if not cfg.seeds or not all(isinstance(s, int) and s >= 0 for s in cfg.seeds):
            raise UsageError("seeds: expected a non-empty list of unsigned integers")
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def canonical(self) -> str:
        return canonical_json(self.to_dict())

    def hash(self) -> str:
        """Identity of the experiment; the output location is not part of it."""
        d = self.to_dict()
        del d["out"]
        return config_hash(d)
