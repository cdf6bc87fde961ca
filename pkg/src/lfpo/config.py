"""Training configuration and its JSON document form.

The document has exactly five sections, each a flat object::

    {
      "task":    {"kind": "copy", "data_vocab": 16, "prompt_len": 6, ...},
      "model":   {"embed_dim": 32, "hidden_dim": 64},
      "decode":  {"confidence_threshold": 0.9, "temperature": 1.0, "max_unmask": null},
      "lfpo":    {"beta": 2.0, "mode": "all", "detach_targets": false, "lambda_anchor": 0.0},
      "trainer": {"batch_prompts": 8, "group_size": 8, ...}
    }

Every section and key is optional and falls back to its default.  Unknown
sections or keys raise :class:`ConfigError` naming the offending key.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from enum import Enum

from .denoiser import DenoiserConfig
from .diffusion import DecodeConfig
from .envs import TaskSpec
from .errors import ConfigError, InvalidInputError
from .objective import LfpoConfig
from .scheduler import AccumMode


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    hidden_dim: int = 64


@dataclass(frozen=True)
class TrainerConfig:
    algorithm: str = "lfpo"
    batch_prompts: int = 8
    group_size: int = 8
    strata: int = 4
    learning_rate: float = 1e-3
    ema_decay: float = 0.95
    block_size: int = 16
    accum_mode: AccumMode = AccumMode.ACCUMULATE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    total_iterations: int = 100
    eval_every: int = 5
    eval_prompts: int = 200
    checkpoint_every: int = 0
    rescale_rewards: bool = False
    log_wall_time: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "accum_mode", AccumMode(self.accum_mode))
        if self.algorithm not in ("lfpo", "pg_baseline"):
            raise InvalidInputError("algorithm must be 'lfpo' or 'pg_baseline'")
        if min(self.batch_prompts, self.group_size, self.strata) < 1:
            raise InvalidInputError("batch_prompts, group_size and strata must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be > 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise InvalidInputError("ema_decay must lie in [0, 1)")
        if self.block_size < 1:
            raise InvalidInputError("block_size must be >= 1")
        if self.total_iterations < 0 or self.eval_every < 0 or self.checkpoint_every < 0:
            raise InvalidInputError("iteration counts must be >= 0")
        if self.eval_prompts < 1:
            raise InvalidInputError("eval_prompts must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    lfpo: LfpoConfig = field(default_factory=LfpoConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    def __post_init__(self):
        if self.trainer.strata > self.task.completion_len:
            raise InvalidInputError("trainer.strata must not exceed task.completion_len")

    @property
    def model_config(self) -> DenoiserConfig:
        return DenoiserConfig(
            vocab_size=self.task.vocab_size,
            seq_len=self.task.seq_len,
            embed_dim=self.model.embed_dim,
            hidden_dim=self.model.hidden_dim,
            seed=self.trainer.seed,
        )

    def replace(self, **sections) -> "TrainConfig":
        """Copy with whole sections or ``section__key`` overrides, e.g. ``trainer__seed=3``."""
        parts = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        nested: dict[str, dict] = {}
        for key, value in sections.items():
            if "__" in key:
                sec, name = key.split("__", 1)
                nested.setdefault(sec, {})[name] = value
            else:
                parts[key] = value
        for sec, updates in nested.items():
            parts[sec] = dataclasses.replace(parts[sec], **updates)
        return TrainConfig(**parts)


_SECTIONS = {
    "task": TaskSpec,
    "model": ModelConfig,
    "decode": DecodeConfig,
    "lfpo": LfpoConfig,
    "trainer": TrainerConfig,
}


def _plain(value):
    return value.value if isinstance(value, Enum) else value


def config_to_dict(config: TrainConfig) -> dict:
    return {
        sec: {f.name: _plain(getattr(getattr(config, sec), f.name))
              for f in dataclasses.fields(cls)}
        for sec, cls in _SECTIONS.items()
    }


def config_to_json(config: TrainConfig) -> str:
    return json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))


def config_from_dict(doc) -> TrainConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    sections = {}
    for sec, body in doc.items():
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown config section '{sec}'", key=sec)
        if not isinstance(body, dict):
            raise ConfigError(f"config section '{sec}' must be an object", key=sec)
        cls = _SECTIONS[sec]
        known = {f.name for f in dataclasses.fields(cls)}
        for key in body:
            if key not in known:
                raise ConfigError(f"unknown config key '{sec}.{key}'", key=f"{sec}.{key}")
        try:
            sections[sec] = cls(**body)
        except (InvalidInputError, ValueError, TypeError) as exc:
            raise ConfigError(f"invalid value in section '{sec}': {exc}", key=sec) from exc
    try:
        return TrainConfig(**sections)
    except InvalidInputError as exc:
        raise ConfigError(str(exc), key="trainer.strata") from exc


def load_config(path) -> TrainConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}", key=None) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}", key=None) from exc
    return config_from_dict(doc)
