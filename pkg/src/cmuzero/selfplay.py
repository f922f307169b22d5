"""Self-play actors and the trainer-to-actor weight exchange."""
from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .envs import Env
from .mcts import SearchConfig, run_search, choose_action
from .model import MuZeroModel
from .nn import ParameterStore
from .replay import Episode, ReplayBuffer, Transition

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SnapshotHandle:
    params: ParameterStore
    version: int
    checksum: str


class SnapshotSlot:
    """Single-slot atomic publication of immutable parameter snapshots.

    Publishing swaps one reference under a lock; fetching reads that
    reference, so a reader sees either the old or the new snapshot.
    """

    def __init__(self, initial: ParameterStore):
        snap = initial.snapshot()
        snap.version = 0
        self._current = SnapshotHandle(snap, 0, snap.checksum())
        self._lock = threading.Lock()

    def publish(self, params: ParameterStore) -> SnapshotHandle:
        snap = params.snapshot()
        handle = SnapshotHandle(snap, snap.version, snap.checksum())
        with self._lock:
            if handle.version >= self._current.version:
                self._current = handle
            return self._current

    def fetch_latest(self) -> SnapshotHandle:
        return self._current


@dataclass
class ActorConfig:
    num_actors: int = 3
    # (training-step threshold, temperature); thresholds strictly increasing
    temperature_schedule: list = field(default_factory=lambda: [(0, 1.0), (0.5, 0.5), (0.75, 0.25)])
    schedule_is_fraction: bool = True
    search: SearchConfig = field(default_factory=SearchConfig)

    def __post_init__(self):
        if self.num_actors < 1:
            raise ValueError("num_actors must be >= 1")
        thresholds = [t for t, _ in self.temperature_schedule]
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError("temperature schedule thresholds must be strictly increasing")

    def temperature(self, training_step: int, total_steps: int) -> float:
        temp = self.temperature_schedule[0][1]
        for threshold, t in self.temperature_schedule:
            limit = threshold * total_steps if self.schedule_is_fraction else threshold
            if training_step >= limit:
                temp = t
        return temp


def play_episode(env: Env, model, search: SearchConfig, temperature: float,
                 rng: np.random.Generator, seed: int | None = None,
                 max_steps: int | None = None) -> Episode:
    """Run one episode with search-based action selection and record it."""
    obs = env.reset(seed)
    transitions = []
    limit = max_steps or env.spec.max_steps
    for _ in range(limit):
        result = run_search(obs, model, search, rng)
        action = choose_action(result, temperature, rng)
        step = env.step(action)
        transitions.append(Transition(obs, np.asarray(action), step.reward, result.value,
                                      result.actions, result.visit_counts, step.done))
        obs = step.observation
        if step.done:
            break
    return Episode(transitions)


def evaluate(env: Env, model, search: SearchConfig, episodes: int, rng: np.random.Generator,
             seeds=None) -> list[float]:
    """Greedy (T=0) episode returns."""
    seeds = list(seeds) if seeds is not None else [int(s) for s in rng.integers(0, 2**31, episodes)]
    return [play_episode(env, model, search, 0.0, rng, seed=s).total_reward for s in seeds[:episodes]]


@dataclass
class ActorStats:
    episodes: int = 0
    errors: int = 0
    steps: int = 0


def actor_loop(env_factory: Callable[[], Env], template: MuZeroModel, slot: SnapshotSlot,
               buffer: ReplayBuffer, config: ActorConfig, rng: np.random.Generator,
               stop: threading.Event, temperature_fn: Callable[[], float],
               stats: ActorStats | None = None, may_play: Callable[[], bool] | None = None) -> ActorStats:
    """Produce episodes until ``stop`` is set, refreshing weights per episode."""
    stats = stats or ActorStats()
    env = env_factory()
    while not stop.is_set():
        if may_play is not None and not may_play():
            stop.wait(0.01)
            continue
        handle = slot.fetch_latest()
        model = template.with_params(handle.params)
        try:
            episode = play_episode(env, model, config.search, temperature_fn(), rng,
                                   seed=int(rng.integers(0, 2**31)))
        except Exception:  # keep producing; failures are counted
            log.exception("actor episode failed")
            stats.errors += 1
            continue
        buffer.add(episode)
        stats.episodes += 1
        stats.steps += len(episode)
    return stats
