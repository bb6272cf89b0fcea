"""Experiment configuration: JSON <-> dataclasses, overrides, digest."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .divergence import RegularizerConfig
from .errors import ConfigError, StorageError
from .grpo_loss import ClipConfig
from .replay_buffer import FillSchedule
from .task_env import TaskSpec

REPLAY_MODES = ("grpo", "dyjr", "rlep", "rlep_dynamic")
OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class BufferConfig:
    max_age: int = 8
    fill: FillSchedule = field(default_factory=FillSchedule)

    def __post_init__(self) -> None:
        if self.max_age < 0:
            raise ConfigError("buffer.max_age must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    task: TaskSpec = field(default_factory=lambda: TaskSpec(modulus_range=(5, 9)))
    group_size: int = 8
    prompt_batch: int = 64
    # prompts per optimizer update; None means the whole prompt batch
    mini_batch: int | None = None
    inner_updates: int = 1
    total_steps: int = 300
    learning_rate: float = 0.2
    optimizer: str = "adam"
    clip: ClipConfig = field(default_factory=ClipConfig)
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    buffer: BufferConfig = field(default_factory=BufferConfig)
    replay_batch: int = 64
    replay_mode: str = "dyjr"
    temperature_train: float = 1.0
    temperature_eval: float = 0.7
    eval_every: int = 50
    eval_queries: int = 64
    eval_samples: int = 16
    entropy_top_k: int = 20
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("group_size", "prompt_batch", "inner_updates", "total_steps", "replay_batch",
                     "eval_every", "eval_queries", "eval_samples", "entropy_top_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.group_size < 2:
            raise ConfigError("group_size must be >= 2")
        if self.mini_batch is not None and not 1 <= self.mini_batch <= self.prompt_batch:
            raise ConfigError("mini_batch must lie in [1, prompt_batch]")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.replay_mode not in REPLAY_MODES:
            raise ConfigError(f"replay_mode must be one of {REPLAY_MODES}, got {self.replay_mode!r}")
        if self.temperature_train <= 0 or self.temperature_eval <= 0:
            raise ConfigError("temperatures must be positive")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.replay_mode == "grpo" and self.regularizer.kind != "none":
            object.__setattr__(self, "regularizer", dataclasses.replace(self.regularizer, kind="none"))

    @property
    def rollouts_per_step(self) -> int:
        return self.prompt_batch * self.group_size

    @property
    def prompts_per_update(self) -> int:
        return self.mini_batch or self.prompt_batch

    def to_dict(self) -> dict[str, Any]:
        return _to_plain(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        return _build(cls, data, "")

    def with_overrides(self, overrides: dict[str, Any]) -> "TrainConfig":
        data = self.to_dict()
        for dotted, value in overrides.items():
            node = data
            *parents, leaf = dotted.split(".")
            for key in parents:
                if not isinstance(node.get(key), dict):
                    raise ConfigError(f"unknown config key {dotted!r}")
                node = node[key]
            if leaf not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node[leaf] = value
        return TrainConfig.from_dict(data)


def _to_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


_NESTED = {
    "task": TaskSpec,
    "clip": ClipConfig,
    "regularizer": RegularizerConfig,
    "buffer": BufferConfig,
    "fill": FillSchedule,
}


def _build(cls: type, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config keys at {path or 'top level'}: {unknown}")
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED:
            value = _build(_NESTED[key], value, f"{path}{key}.")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in {path or 'config'}: {exc}") from exc


def parse_override(text: str) -> tuple[str, Any]:
    """``key.sub=value``; the value is read as JSON, falling back to a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path: str | Path) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return TrainConfig.from_dict(data)
