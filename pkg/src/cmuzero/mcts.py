"""Monte Carlo tree search with progressive widening over a learned model."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import GaussianPolicy, decode_scalar, gaussian_logpdf

log = logging.getLogger(__name__)


@dataclass
class SearchConfig:
    num_simulations: int = 50
    pw_constant: float = 1.0
    pw_exponent: float = 0.5
    c1: float = 1.25
    c2: float = 19652.0
    discount: float = 0.99
    temperature: float = 1.0
    seed: int | None = None

    def __post_init__(self):
        if self.num_simulations < 0:
            raise ValueError("num_simulations must be >= 0")
        if self.pw_constant <= 0:
            raise ValueError("pw_constant must be > 0")
        if not 0.0 < self.pw_exponent < 1.0:
            raise ValueError("pw_exponent must lie in (0, 1)")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must lie in (0, 1]")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


class SearchEdge:
    __slots__ = ("action", "N", "Q", "prior_mu", "prior_sigma", "log_prior", "R", "child")

    def __init__(self, action: np.ndarray, policy: GaussianPolicy):
        self.action = action
        self.N = 0
        self.Q = 0.0
        self.prior_mu = policy.mean
        self.prior_sigma = policy.std
        self.log_prior = gaussian_logpdf(action, policy)
        self.R = 0.0
        self.child: SearchNode | None = None


class SearchNode:
    __slots__ = ("state", "edges", "visit_count", "value", "policy", "_priors")

    def __init__(self, state: np.ndarray, policy: GaussianPolicy, value: float):
        self.state = state
        self.policy = policy
        self.value = value
        self.edges: list[SearchEdge] = []
        self.visit_count = 1
        self._priors: list[float] | None = None


class MinMaxStats:
    def __init__(self):
        self.lo = math.inf
        self.hi = -math.inf

    def update(self, q: float) -> None:
        if q < self.lo:
            self.lo = q
        if q > self.hi:
            self.hi = q

    def normalize(self, q: float) -> float:
        if self.hi > self.lo:
            return (q - self.lo) / (self.hi - self.lo)
        return q


@dataclass
class SearchResult:
    actions: list[np.ndarray]
    visit_counts: list[int]
    value: float
    action: np.ndarray | None = None
    root: SearchNode | None = field(default=None, repr=False)


def widening_threshold(n: int, c_pw: float, alpha: float) -> float:
    return c_pw * n ** alpha


def normalize_log_densities(log_densities) -> np.ndarray:
    """Normalize densities given in log space; scale invariant by construction."""
    ld = np.asarray(log_densities, dtype=np.float64)
    top = np.max(ld)
    if not np.isfinite(top):
        log.warning("all prior densities vanished; using uniform priors")
        return np.full(ld.shape, 1.0 / ld.size)
    w = np.exp(ld - top)
    return w / w.sum()


def normalize_priors(node: SearchNode) -> list[float]:
    """Prior of each child: its density under the node policy over the sum
    across the node's current children. Cached until the next widen."""
    if not node.edges:
        raise ValueError("node has no children")
    if node._priors is None:
        logs = [e.log_prior for e in node.edges]
        top = max(logs)
        if not math.isfinite(top):
            node._priors = normalize_log_densities(logs).tolist()
        else:
            w = [math.exp(x - top) for x in logs]
            z = sum(w)
            node._priors = [x / z for x in w]
    return node._priors


def pucb_scores(node: SearchNode, config: SearchConfig, stats: MinMaxStats | None = None) -> list[float]:
    priors = normalize_priors(node)
    total = node.visit_count - 1  # sum of child visits
    explore = math.sqrt(total) * (config.c1 + math.log((total + config.c2 + 1.0) / config.c2))
    scores = []
    for edge, prior in zip(node.edges, priors):
        q = 0.0
        if edge.N > 0:
            q = stats.normalize(edge.Q) if stats is not None else edge.Q
        scores.append(q + prior * explore / (1 + edge.N))
    return scores


def pucb_select(node: SearchNode, config: SearchConfig, stats: MinMaxStats | None = None) -> int:
    """Index of the max PUCB score. Exact ties go to the larger prior, then
    the lower index (with no child visits every score is zero)."""
    if not node.edges:
        raise RuntimeError("pucb_select on a node without edges")
    scores = pucb_scores(node, config, stats)
    best = max(scores)
    tied = [i for i, x in enumerate(scores) if x == best]
    if len(tied) == 1:
        return tied[0]
    priors = normalize_priors(node)
    return max(tied, key=lambda i: (priors[i], -i))


def widen(node: SearchNode, rng: np.random.Generator) -> SearchEdge:
    action = np.clip(node.policy.sample(rng), -1.0, 1.0)
    edge = SearchEdge(action, node.policy)
    node.edges.append(edge)
    node._priors = None
    return edge


def make_node(state: np.ndarray, model, rng: np.random.Generator) -> SearchNode:
    policy, value_logits = model.predict(state)
    node = SearchNode(state, policy, float(decode_scalar(value_logits)))
    widen(node, rng)
    return node


def expand(edge: SearchEdge, parent: SearchNode, model, rng: np.random.Generator) -> SearchNode:
    if edge.child is not None:
        raise RuntimeError("edge already expanded")
    reward_logits, state = model.dynamics(parent.state, edge.action)
    edge.R = float(decode_scalar(reward_logits))
    edge.child = make_node(state, model, rng)
    return edge.child


def backup(path: list[tuple[SearchNode, SearchEdge]], leaf_value: float, discount: float,
           stats: MinMaxStats | None = None) -> None:
    g = leaf_value
    for node, edge in reversed(path):
        g = edge.R + discount * g
        edge.Q = (edge.N * edge.Q + g) / (edge.N + 1)
        edge.N += 1
        node.visit_count += 1
        if stats is not None:
            stats.update(edge.Q)


def run_search(observation, model, config: SearchConfig, rng: np.random.Generator | None = None,
               observer: Callable | None = None) -> SearchResult:
    """Plan from ``observation``.

    ``observer``, if given, is called as ``observer(node, widened)`` at every
    selection decision and ``observer(None, path)`` after every backup.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    root = make_node(model.represent(observation), model, rng)
    stats = MinMaxStats()
    for _ in range(config.num_simulations):
        node = root
        path = []
        while True:
            widened = len(node.edges) < widening_threshold(node.visit_count, config.pw_constant,
                                                           config.pw_exponent)
            if observer is not None:
                observer(node, widened)
            edge = widen(node, rng) if widened else node.edges[pucb_select(node, config, stats)]
            path.append((node, edge))
            if edge.child is None:
                break
            node = edge.child
        leaf = expand(edge, node, model, rng)
        backup(path, leaf.value, config.discount, stats)
        if observer is not None:
            observer(None, path)

    visited = [e for e in root.edges if e.N > 0]
    if visited:
        counts = [e.N for e in visited]
        value = float(np.dot(counts, [e.Q for e in visited]) / sum(counts))
    else:
        counts, value = [], root.value
    result = SearchResult([e.action for e in visited], counts, value, root=root)
    if visited:
        result.action = choose_action(result, config.temperature, rng)
    return result


def visit_density_target(result: SearchResult, tau: float = 1.0) -> list[tuple[np.ndarray, float]]:
    counts = np.asarray(result.visit_counts, dtype=np.float64)
    keep = counts > 0
    if not np.any(keep):
        raise ValueError("search produced no visits")
    w = counts[keep] ** tau
    w /= w.sum()
    actions = [a for a, k in zip(result.actions, keep) if k]
    return list(zip(actions, w.tolist()))


def action_probabilities(counts, temperature: float) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.size == 0:
        raise ValueError("no visit counts")
    if temperature == 0.0:
        p = np.zeros_like(counts)
        p[int(np.argmax(counts))] = 1.0
        return p
    if math.isinf(temperature):
        return np.full(counts.shape, 1.0 / counts.size)
    logc = np.log(counts) / temperature
    w = np.exp(logc - logc.max())
    return w / w.sum()


def choose_action(result: SearchResult, temperature: float, rng: np.random.Generator) -> np.ndarray:
    p = action_probabilities(result.visit_counts, temperature)
    idx = int(np.argmax(p)) if temperature == 0.0 else int(rng.choice(len(p), p=p))
    return result.actions[idx]
