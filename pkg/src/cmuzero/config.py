"""Run configuration: one JSON document, dataclass sections, seed splitting.

Seed splitting: every stochastic component draws from
``np.random.SeedSequence([master_seed, component, index])`` with component
codes below. Adding actors therefore never changes the trainer's or the
evaluator's streams.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import ENVIRONMENTS
from .mcts import SearchConfig
from .model import ModelConfig
from .replay import ReplayConfig
from .selfplay import ActorConfig
from .training import TrainConfig

SEED_INIT = 0
SEED_TRAINER = 1
SEED_ACTOR = 2
SEED_EVAL = 3


class ConfigError(ValueError):
    pass


def component_rng(master_seed: int, component: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, component, index]))


@dataclass
class RunConfig:
    env: str = "cartpole"
    env_params: dict = field(default_factory=dict)
    seed: int = 0
    out_dir: str = "runs/default"
    total_steps: int = 15000
    eval_interval: int = 500
    eval_episodes: int = 5
    target_score: float | None = None
    train_steps_per_env_step: float = 0.5
    min_buffer_transitions: int = 500
    actor_lead_transitions: int = 4000
    publish_interval: int = 10
    search: SearchConfig = field(default_factory=SearchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    actor: ActorConfig = field(default_factory=ActorConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.env not in ENVIRONMENTS:
            raise ConfigError(f"unknown environment {self.env!r}; choose from {sorted(ENVIRONMENTS)}")
        if self.total_steps < 0 or self.eval_interval < 1 or self.eval_episodes < 1:
            raise ConfigError("total_steps >= 0, eval_interval >= 1, eval_episodes >= 1 required")
        if self.train_steps_per_env_step <= 0:
            raise ConfigError("train_steps_per_env_step must be > 0")
        self.actor.search = self.search

    @property
    def synchronous(self) -> bool:
        """Single-actor runs interleave acting and training in one thread."""
        return self.actor.num_actors == 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["actor"].pop("search", None)
        d["actor"]["temperature_schedule"] = [list(x) for x in self.actor.temperature_schedule]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        sections = {"search": SearchConfig, "train": TrainConfig, "actor": ActorConfig,
                    "replay": ReplayConfig, "model": ModelConfig}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key in sections:
                sub = sections[key]
                if not isinstance(value, dict):
                    raise ConfigError(f"section {key!r} must be an object")
                sub_known = {f.name for f in dataclasses.fields(sub)} - {"search"}
                bad = set(value) - sub_known
                if bad:
                    raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
                if key == "actor" and "temperature_schedule" in value:
                    value = {**value, "temperature_schedule": [tuple(x) for x in value["temperature_schedule"]]}
                try:
                    kwargs[key] = sub(**value)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"invalid {key!r} section: {exc}") from exc
            else:
                kwargs[key] = value
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
