"""Episode storage with two-stage prioritized sampling."""
from __future__ import annotations

import json
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PRIORITY_FLOOR = 1e-6


class NotReadyError(RuntimeError):
    pass


@dataclass
class ReplayConfig:
    capacity: int = 500
    td_steps: int = 10
    priority_alpha: float = 1.0
    priority_beta: float = 1.0


@dataclass
class Transition:
    observation: np.ndarray
    action: np.ndarray
    reward: float
    search_value: float
    root_actions: list[np.ndarray]
    root_visit_counts: list[int]
    done: bool = False

    def __post_init__(self):
        if len(self.root_actions) != len(self.root_visit_counts) or not self.root_actions:
            raise ValueError("root_actions and root_visit_counts must be equal-length and non-empty")


@dataclass
class Episode:
    transitions: list[Transition]
    priorities: np.ndarray | None = None
    episode_id: int = -1
    value_targets: np.ndarray | None = field(default=None, repr=False)

    @property
    def priority(self) -> float:
        return float(np.mean(self.priorities))

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def total_reward(self) -> float:
        return float(sum(t.reward for t in self.transitions))


@dataclass
class TrainingSample:
    """Start observation plus K+1 aligned targets (index 0 is the start step).

    ``actions[k]`` leads from unroll step k to k+1. ``policy_mask[k]`` is
    False on absorbing steps past the end of the episode.
    """
    observation: np.ndarray
    actions: np.ndarray              # (K, A)
    value_targets: np.ndarray        # (K+1,)
    reward_targets: np.ndarray       # (K+1,), entry 0 unused
    root_actions: list               # K+1 lists of action vectors
    root_counts: list                # K+1 lists of ints
    policy_mask: np.ndarray          # (K+1,) bool
    weight: float = 1.0
    sample_id: tuple = field(default=(-1, -1))


def n_step_return(episode: Episode, t: int, n: int, discount: float) -> float:
    trs = episode.transitions
    if not 0 <= t < len(trs):
        raise IndexError(t)
    end = min(t + n, len(trs))
    z = sum(discount ** i * trs[t + i].reward for i in range(end - t))
    if t + n < len(trs):
        z += discount ** n * trs[t + n].search_value
    return float(z)


def compute_priority(search_value: float, n_step_target: float) -> float:
    return abs(search_value - n_step_target) + PRIORITY_FLOOR


def initial_priorities(episode: Episode, n: int, discount: float) -> np.ndarray:
    return np.array([compute_priority(tr.search_value, n_step_return(episode, t, n, discount))
                     for t, tr in enumerate(episode.transitions)])


def sampling_probabilities(priorities, alpha: float) -> np.ndarray:
    p = np.asarray(priorities, dtype=np.float64) ** alpha
    return p / p.sum()


class ReplayBuffer:
    """Bounded FIFO of episodes; every public call holds the lock briefly."""

    def __init__(self, config: ReplayConfig | None = None, discount: float = 0.99):
        self.config = config or ReplayConfig()
        self.discount = discount
        self._episodes: OrderedDict[int, Episode] = OrderedDict()
        self._next_id = 0
        self._lock = threading.Lock()
        self.total_episodes = 0
        self.total_transitions = 0
        self.stale_updates = 0

    def __len__(self) -> int:
        return len(self._episodes)

    @property
    def num_transitions(self) -> int:
        with self._lock:
            return sum(len(e) for e in self._episodes.values())

    def add(self, episode: Episode) -> int:
        if not episode.transitions:
            raise ValueError("empty episode")
        n, discount = self.config.td_steps, self.discount
        episode.value_targets = np.array([n_step_return(episode, t, n, discount)
                                          for t in range(len(episode))])
        if episode.priorities is None:
            episode.priorities = np.array([compute_priority(tr.search_value, z) for tr, z
                                           in zip(episode.transitions, episode.value_targets)])
        with self._lock:
            episode.episode_id = self._next_id
            self._next_id += 1
            self._episodes[episode.episode_id] = episode
            while len(self._episodes) > self.config.capacity:
                self._episodes.popitem(last=False)
            self.total_episodes += 1
            self.total_transitions += len(episode)
        return episode.episode_id

    def episodes(self) -> list[Episode]:
        with self._lock:
            return list(self._episodes.values())

    def sample_indices(self, n: int, rng: np.random.Generator, alpha: float | None = None):
        """Draw ``n`` (episode_id, t) pairs with their overall probability P(i)
        and the buffer's transition count."""
        alpha = self.config.priority_alpha if alpha is None else alpha
        with self._lock:
            if not self._episodes:
                raise NotReadyError("replay buffer is empty")
            eps = list(self._episodes.values())
            ep_prob = sampling_probabilities([e.priority for e in eps], alpha)
            total = sum(len(e) for e in eps)
            picks = rng.choice(len(eps), size=n, p=ep_prob)
            out = [None] * n
            for j in np.unique(picks):
                where = np.flatnonzero(picks == j)
                ep = eps[j]
                t_prob = sampling_probabilities(ep.priorities, alpha)
                ts = rng.choice(len(ep), size=where.size, p=t_prob)
                for w, t in zip(where, ts):
                    out[w] = (ep, int(t), float(ep_prob[j] * t_prob[t]))
        return out, total

    def sample_batch(self, batch_size: int, num_unroll: int, rng: np.random.Generator,
                     alpha: float | None = None, beta: float | None = None) -> list[TrainingSample]:
        beta = self.config.priority_beta if beta is None else beta
        drawn, total = self.sample_indices(batch_size, rng, alpha)
        weights = np.array([(1.0 / (total * p)) ** beta for _, _, p in drawn])
        weights /= weights.max()
        return [self.make_sample(ep, t, num_unroll, w) for (ep, t, _), w in zip(drawn, weights)]

    def make_sample(self, episode: Episode, t: int, num_unroll: int, weight: float = 1.0) -> TrainingSample:
        trs = episode.transitions
        length = len(trs)
        action_dim = trs[0].action.shape[-1]
        z = episode.value_targets
        if z is None:
            z = [n_step_return(episode, i, self.config.td_steps, self.discount) for i in range(length)]
        actions = np.zeros((num_unroll, action_dim))
        values = np.zeros(num_unroll + 1)
        rewards = np.zeros(num_unroll + 1)
        mask = np.zeros(num_unroll + 1, dtype=bool)
        root_actions, root_counts = [], []
        for k in range(num_unroll + 1):
            i = t + k
            if k > 0 and i - 1 < length:
                rewards[k] = trs[i - 1].reward
            if i < length:
                values[k] = z[i]
                mask[k] = True
                root_actions.append(trs[i].root_actions)
                root_counts.append(trs[i].root_visit_counts)
            else:
                root_actions.append([])
                root_counts.append([])
            if k < num_unroll and i < length:
                actions[k] = trs[i].action
        return TrainingSample(trs[t].observation, actions, values, rewards, root_actions,
                              root_counts, mask, float(weight), (episode.episode_id, t))

    def update_priorities(self, sample_ids, new_priorities) -> None:
        with self._lock:
            for (eid, t), p in zip(sample_ids, new_priorities):
                ep = self._episodes.get(eid)
                if ep is None:
                    self.stale_updates += 1
                    continue
                ep.priorities[t] = max(float(p), PRIORITY_FLOOR)


# ---------------------------------------------------------------------------
# persistence: little-endian u64 length prefix + JSON record per episode


def _episode_to_json(ep: Episode) -> dict:
    return {
        "priorities": [float(p) for p in ep.priorities] if ep.priorities is not None else None,
        "transitions": [{
            "observation": tr.observation.tolist(),
            "action": np.asarray(tr.action).tolist(),
            "reward": tr.reward,
            "search_value": tr.search_value,
            "root_actions": [np.asarray(a).tolist() for a in tr.root_actions],
            "root_visit_counts": [int(c) for c in tr.root_visit_counts],
            "done": tr.done,
        } for tr in ep.transitions],
    }


def save_episodes(path: str | Path, episodes) -> None:
    with open(path, "wb") as fh:
        for ep in episodes:
            blob = json.dumps(_episode_to_json(ep)).encode()
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)


def load_episodes(path: str | Path) -> list[Episode]:
    out = []
    with open(path, "rb") as fh:
        while header := fh.read(8):
            (size,) = struct.unpack("<Q", header)
            rec = json.loads(fh.read(size))
            trs = [Transition(np.array(d["observation"]), np.array(d["action"]), d["reward"],
                              d["search_value"], [np.array(a) for a in d["root_actions"]],
                              d["root_visit_counts"], d["done"]) for d in rec["transitions"]]
            pr = rec["priorities"]
            out.append(Episode(trs, None if pr is None else np.array(pr)))
    return out
