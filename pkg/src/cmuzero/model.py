"""Representation, dynamics and prediction functions plus scalar encodings."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import nn
from .nn import DenseNetwork, DenseNetworkSpec, ParameterStore, Tape, Var

SUPPORT_MIN = -10
SUPPORT_MAX = 10
SUPPORT_SIZE = SUPPORT_MAX - SUPPORT_MIN + 1
SUPPORT = np.arange(SUPPORT_MIN, SUPPORT_MAX + 1, dtype=np.float64)

TRANSFORM_EPS = 0.001
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class InputError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scalar transforms


def transform_scalar(x):
    """h(x) = sign(x)(sqrt(|x|+1) - 1) + eps*x."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * (np.sqrt(np.abs(x) + 1.0) - 1.0) + TRANSFORM_EPS * x


def inverse_transform_scalar(y):
    y = np.asarray(y, dtype=np.float64)
    eps = TRANSFORM_EPS
    root = (np.sqrt(1.0 + 4.0 * eps * (np.abs(y) + 1.0 + eps)) - 1.0) / (2.0 * eps)
    return np.sign(y) * (root * root - 1.0)


def scalar_to_support(x):
    """Two-hot projection of (already transformed) scalars onto -10..10.

    Works elementwise; the result has one extra trailing axis of size 21.
    NaN inputs give all-NaN rows.
    """
    x = np.clip(np.asarray(x, dtype=np.float64), SUPPORT_MIN, SUPPORT_MAX)
    bad = np.isnan(x)
    if np.any(bad):
        out = scalar_to_support(np.where(bad, 0.0, x))
        out[bad] = np.nan
        return out
    low = np.clip(np.floor(x), SUPPORT_MIN, SUPPORT_MAX - 1)
    frac = x - low
    idx = (low - SUPPORT_MIN).astype(np.int64)
    out = np.zeros(x.shape + (SUPPORT_SIZE,))
    np.put_along_axis(out, idx[..., None], (1.0 - frac)[..., None], axis=-1)
    np.put_along_axis(out, idx[..., None] + 1, frac[..., None], axis=-1)
    return out


def support_to_scalar(dist):
    return np.asarray(dist, dtype=np.float64) @ SUPPORT


def softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def decode_scalar(logits):
    """Logits over the support -> raw-scale scalar."""
    if logits.ndim == 1:
        e = np.exp(logits - logits.max())
        y = float(e @ SUPPORT) / float(e.sum())
        return float(inverse_transform_scalar(y))
    return inverse_transform_scalar(support_to_scalar(softmax(logits)))


def encode_target(x):
    """Raw-scale scalar target -> categorical target distribution."""
    return scalar_to_support(transform_scalar(x))


def scale_hidden(s: np.ndarray) -> np.ndarray:
    if s.ndim == 1:
        lo, hi = s.min(), s.max()
        if hi <= lo:
            return np.zeros_like(s)
        return (2.0 * s - (lo + hi)) / (hi - lo)
    return nn.minmax_scale_array(s)


# ---------------------------------------------------------------------------
# Gaussian policy


@dataclass
class GaussianPolicy:
    mean: np.ndarray
    log_std: np.ndarray

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.std * rng.standard_normal(self.mean.shape)

    def entropy(self) -> float:
        return float(np.sum(0.5 * math.log(2.0 * math.pi * math.e) + self.log_std))


def gaussian_logpdf(action, policy: GaussianPolicy) -> float:
    """Log density of a diagonal Gaussian, summed over action dimensions."""
    total = 0.0
    for a, mu, ls in zip(np.asarray(action, dtype=np.float64).reshape(-1).tolist(),
                         policy.mean.reshape(-1).tolist(), policy.log_std.reshape(-1).tolist()):
        sigma = math.exp(ls)
        if not sigma > 0.0:
            raise ValueError("standard deviation must be positive")
        z = (a - mu) / sigma
        total += -0.5 * z * z - ls - HALF_LOG_2PI
    return total


def gaussian_logpdf_batch(actions: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (actions - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - HALF_LOG_2PI, axis=-1)


# ---------------------------------------------------------------------------
# networks


@dataclass
class ModelConfig:
    hidden_dim: int = 32
    width: int = 64
    depth: int = 2

    def to_dict(self) -> dict:
        return asdict(self)


class MuZeroModel:
    """The three learned functions over one ParameterStore.

    Inference methods take single vectors (or batches) and never record a
    tape; the ``*_t`` variants are their differentiable twins used for
    training. ``dynamics_calls`` and ``predict_calls`` count inference calls.
    """

    def __init__(self, obs_dim: int, action_dim: int, config: ModelConfig | None = None,
                 params: ParameterStore | None = None, rng: np.random.Generator | None = None):
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.config = config or ModelConfig()
        c = self.config
        hidden = [c.width] * c.depth
        h = c.hidden_dim
        self.representation = DenseNetwork(DenseNetworkSpec((obs_dim, *hidden, h)), "repr")
        self.dynamics_net = DenseNetwork(
            DenseNetworkSpec((h + action_dim, *hidden, h + SUPPORT_SIZE)), "dyn")
        self.policy_mean = DenseNetwork(
            DenseNetworkSpec((h, *hidden, action_dim), output_activation="tanh"), "pi_mean")
        self.policy_log_std = DenseNetwork(DenseNetworkSpec((h, *hidden, action_dim)), "pi_logstd")
        self.value_net = DenseNetwork(DenseNetworkSpec((h, *hidden, SUPPORT_SIZE)), "value")
        self.networks = [self.representation, self.dynamics_net, self.policy_mean,
                         self.policy_log_std, self.value_net]
        if params is None:
            params = ParameterStore()
            rng = rng if rng is not None else np.random.default_rng(0)
            for net in self.networks:
                net.init(params, rng)
        else:
            self._check_params(params)
        self.params = params
        self.dynamics_calls = 0
        self.predict_calls = 0
        self._fused = None

    def _check_params(self, params: ParameterStore) -> None:
        for net in self.networks:
            for (wn, bn), fan_in, fan_out in zip(net.names, net.spec.widths[:-1], net.spec.widths[1:]):
                if wn not in params or params[wn].shape != (fan_in, fan_out) \
                        or params[bn].shape != (fan_out,):
                    raise nn.ConfigurationError(
                        f"parameters do not match architecture at {wn} "
                        f"(expected {(fan_in, fan_out)})")

    def with_params(self, params: ParameterStore) -> "MuZeroModel":
        return MuZeroModel(self.obs_dim, self.action_dim, self.config, params)

    def meta(self) -> dict:
        return {"obs_dim": self.obs_dim, "action_dim": self.action_dim,
                "model": self.config.to_dict()}

    # -- inference ---------------------------------------------------------

    def represent(self, observation) -> np.ndarray:
        obs = np.asarray(observation, dtype=np.float64)
        if obs.shape[-1] != self.obs_dim:
            raise InputError(f"observation width {obs.shape[-1]} != {self.obs_dim}")
        if not np.all(np.isfinite(obs)):
            raise InputError("non-finite observation")
        return scale_hidden(self.representation(self.params, obs))

    def dynamics(self, state: np.ndarray, action) -> tuple[np.ndarray, np.ndarray]:
        action = np.asarray(action, dtype=np.float64)
        if not (np.all(np.isfinite(state)) and np.all(np.isfinite(action))):
            raise InputError("non-finite dynamics input")
        self.dynamics_calls += 1
        out = self.dynamics_net(self.params, np.concatenate([state, action], axis=-1))
        h = self.config.hidden_dim
        return out[..., h:], scale_hidden(out[..., :h])

    def _fused_heads(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """The three prediction heads stacked into one block-diagonal network.

        Cached only for read-only (snapshot) parameters.
        """
        frozen = not next(iter(self.params.params.values())).flags.writeable
        if self._fused is None or not frozen:
            heads = (self.policy_mean, self.policy_log_std, self.value_net)
            p = self.params.params
            layers = []
            for i in range(heads[0].spec.n_layers):
                ws = [p[h.names[i][0]] for h in heads]
                bs = [p[h.names[i][1]] for h in heads]
                if i == 0:
                    w = np.concatenate(ws, axis=1)
                else:
                    w = np.zeros((sum(x.shape[0] for x in ws), sum(x.shape[1] for x in ws)))
                    r = c = 0
                    for x in ws:
                        w[r:r + x.shape[0], c:c + x.shape[1]] = x
                        r += x.shape[0]
                        c += x.shape[1]
                layers.append((w, np.concatenate(bs)))
            if not frozen:
                return layers
            self._fused = layers
        return self._fused

    def predict(self, state: np.ndarray) -> tuple[GaussianPolicy, np.ndarray]:
        self.predict_calls += 1
        layers = self._fused_heads()
        h = state
        last = len(layers) - 1
        for i, (w, b) in enumerate(layers):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, nn.LEAKY_SLOPE * h)
        a = self.action_dim
        mean = np.tanh(h[..., :a])
        log_std = np.clip(h[..., a:2 * a], LOG_STD_MIN, LOG_STD_MAX)
        return GaussianPolicy(mean, log_std), h[..., 2 * a:]

    # -- taped -------------------------------------------------------------

    def represent_t(self, tape: Tape, observations: np.ndarray) -> Var:
        return nn.minmax_scale(self.representation.forward(self.params, observations, tape))

    def dynamics_t(self, tape: Tape, state: Var, actions: np.ndarray) -> tuple[Var, Var]:
        out = self.dynamics_net.forward(self.params, nn.concat([state, actions]), tape)
        h = self.config.hidden_dim
        reward_logits = nn.slice_last(out, h, h + SUPPORT_SIZE)
        return reward_logits, nn.minmax_scale(nn.slice_last(out, 0, h))

    def predict_t(self, tape: Tape, state: Var) -> tuple[Var, Var, Var]:
        p = self.params
        mean = self.policy_mean.forward(p, state, tape)
        log_std = nn.clip(self.policy_log_std.forward(p, state, tape), LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std, self.value_net.forward(p, state, tape)


class KnownRewardModel:
    """Exact model of a one-step task with a known reward function.

    The hidden state is a single flag: 0 before acting, 1 afterwards
    (absorbing, zero reward and value). The policy prior is a fixed Gaussian.
    Used as an oracle to test the search independently of learning.
    """

    def __init__(self, reward_fn: Callable[[np.ndarray], float], action_dim: int = 1,
                 prior_mean: float = 0.0, prior_log_std: float = 0.0):
        self.reward_fn = reward_fn
        self.action_dim = action_dim
        self.prior = GaussianPolicy(np.full(action_dim, prior_mean), np.full(action_dim, prior_log_std))
        self.dynamics_calls = 0
        self.predict_calls = 0

    @staticmethod
    def _logits_for(x: float) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(encode_target(x))

    def represent(self, observation) -> np.ndarray:
        return np.zeros(1)

    def dynamics(self, state, action):
        self.dynamics_calls += 1
        reward = 0.0 if state[0] > 0 else float(self.reward_fn(np.asarray(action)))
        return self._logits_for(reward), np.ones(1)

    def predict(self, state):
        self.predict_calls += 1
        return GaussianPolicy(self.prior.mean.copy(), self.prior.log_std.copy()), self._logits_for(0.0)
