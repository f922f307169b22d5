"""Losses, K-step unrolled training, and the sampled KL estimator."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable, Sequence

import numpy as np

from . import nn
from .model import (HALF_LOG_2PI, SUPPORT_SIZE, GaussianPolicy, MuZeroModel, decode_scalar,
                    encode_target, gaussian_logpdf, gaussian_logpdf_batch)
from .nn import Adam, Tape, TrainingError, Var
from .replay import PRIORITY_FLOOR, TrainingSample

HALF_LOG_2PIE = 0.5 * math.log(2.0 * math.pi * math.e)
POLICY_GRADIENTS = ("score", "centered", "pathwise")


@dataclass
class TrainConfig:
    entropy_weight: float = 5e-3
    l2_weight: float = 1e-4
    tau: float = 1.0
    num_unroll: int = 5
    learning_rate: float = 3e-4
    batch_size: int = 128
    policy_gradient: str = "score"

    def __post_init__(self):
        if self.entropy_weight < 0 or self.l2_weight < 0:
            raise ValueError("loss weights must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.num_unroll < 1 or self.batch_size < 1:
            raise ValueError("num_unroll and batch_size must be >= 1")
        if self.policy_gradient not in POLICY_GRADIENTS:
            raise ValueError(f"policy_gradient must be one of {POLICY_GRADIENTS}")


@dataclass
class LossBreakdown:
    policy: float
    value: float
    reward: float
    entropy: float
    l2: float
    total: float

    def recomposed(self, entropy_weight: float, l2_weight: float) -> float:
        return self.reward + self.value + self.policy + entropy_weight * self.entropy + l2_weight * self.l2

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------------------
# single-state losses on plain arrays


def policy_loss(policy: GaussianPolicy, actions: Sequence, visit_counts: Sequence[int], tau: float) -> float:
    """Mean over root actions of log pi(a_i) - tau * log n(a_i)."""
    counts = np.asarray(visit_counts, dtype=np.float64)
    if np.any(counts < 1):
        raise ValueError("visit counts must be >= 1; filter unvisited actions first")
    logp = [gaussian_logpdf(a, policy) for a in actions]
    return float(np.mean(np.asarray(logp) - tau * np.log(counts)))


def entropy_loss(policy: GaussianPolicy) -> float:
    return -float(np.sum(HALF_LOG_2PIE + policy.log_std))


def value_loss(target: float, value_logits: np.ndarray) -> float:
    logits = np.asarray(value_logits, dtype=np.float64)
    z = logits - logits.max()
    log_q = z - math.log(np.exp(z).sum())
    return -float(encode_target(target) @ log_q)


reward_loss = value_loss


# ---------------------------------------------------------------------------
# taped building blocks


def gaussian_logpdf_t(mean: Var, log_std: Var, actions: np.ndarray) -> Var:
    """log pi for actions of shape (B, M, A) under per-row policies (B, A) -> (B, M)."""
    b, a = mean.shape
    mu = nn.reshape(mean, (b, 1, a))
    ls = nn.reshape(log_std, (b, 1, a))
    z = nn.mul(nn.add(actions, nn.neg(mu)), nn.exp(nn.neg(ls)))
    inner = nn.add(nn.mul(nn.square(z), -0.5), nn.neg(ls))
    return nn.add(nn.sum_(inner, axis=-1), -a * HALF_LOG_2PI)


def policy_term(logp: Var, log_counts: np.ndarray, mask: np.ndarray, tau: float,
                gradient: str = "score") -> Var:
    """Per-row mean of (log pi(a_i) - tau log n_i) over the unmasked actions.

    The forward value is the visit-count policy loss. With
    ``gradient="score"`` the backward pass returns the score-function
    gradient mean_i[grad log pi(a_i) * (log pi(a_i) - tau log n_i)], the
    gradient of the KL divergence from the policy to the visit density. With
    ``"centered"`` the score-function residuals have their per-row mean
    removed, i.e. log Z is kept and set to its least-squares value instead of
    being dropped; this fits the shape of log pi to tau log n up to a
    constant. With ``"pathwise"`` it returns the plain derivative
    mean_i[grad log pi(a_i)].
    """
    count = np.maximum(mask.sum(axis=-1), 1)
    diff = np.where(mask, logp.value - tau * log_counts, 0.0)
    value = diff.sum(axis=-1) / count

    def back(g):
        per_row = (g / count)[:, None]
        if gradient == "score":
            return (per_row * diff,)
        if gradient == "centered":
            return (per_row * np.where(mask, diff - value[:, None], 0.0),)
        return (per_row * mask,)

    return logp.tape.record(value, (logp,), back)


def entropy_t(log_std: Var) -> Var:
    """Negated diagonal-Gaussian entropy per row."""
    a = log_std.shape[-1]
    return nn.neg(nn.add(nn.sum_(log_std, axis=-1), a * HALF_LOG_2PIE))


def cross_entropy_t(logits: Var, target_probs: np.ndarray) -> Var:
    return nn.neg(nn.sum_(nn.mul(nn.log_softmax(logits), target_probs), axis=-1))


# ---------------------------------------------------------------------------
# batches and unrolling


@dataclass
class Batch:
    observations: np.ndarray     # (B, O)
    actions: np.ndarray          # (B, K, A)
    value_targets: np.ndarray    # (B, K+1) raw scale
    reward_targets: np.ndarray   # (B, K+1) raw scale
    root_actions: np.ndarray     # (B, K+1, M, A)
    log_counts: np.ndarray       # (B, K+1, M)
    action_mask: np.ndarray      # (B, K+1, M)
    policy_mask: np.ndarray      # (B, K+1)
    weights: np.ndarray          # (B,)

    @property
    def num_unroll(self) -> int:
        return self.actions.shape[1]


def collate(samples: Sequence[TrainingSample]) -> Batch:
    b = len(samples)
    k1 = len(samples[0].value_targets)
    a = samples[0].actions.shape[-1]
    m = max(max((len(c) for c in s.root_counts), default=1) for s in samples)
    m = max(m, 1)
    root_actions = np.zeros((b, k1, m, a))
    log_counts = np.zeros((b, k1, m))
    action_mask = np.zeros((b, k1, m), dtype=bool)
    for i, s in enumerate(samples):
        for k, (acts, counts) in enumerate(zip(s.root_actions, s.root_counts)):
            if counts:
                n = len(counts)
                root_actions[i, k, :n] = np.asarray(acts).reshape(n, a)
                log_counts[i, k, :n] = np.log(np.asarray(counts, dtype=np.float64))
                action_mask[i, k, :n] = True
    return Batch(
        observations=np.stack([s.observation for s in samples]),
        actions=np.stack([s.actions for s in samples]),
        value_targets=np.stack([s.value_targets for s in samples]),
        reward_targets=np.stack([s.reward_targets for s in samples]),
        root_actions=root_actions, log_counts=log_counts, action_mask=action_mask,
        policy_mask=np.stack([s.policy_mask for s in samples]),
        weights=np.array([s.weight for s in samples]),
    )


@dataclass
class StepOutput:
    mean: Var
    log_std: Var
    value_logits: Var
    reward_logits: Var | None
    state: Var


def unroll_and_predict(model: MuZeroModel, tape: Tape, observations: np.ndarray, actions: np.ndarray,
                       halve_dynamics_gradient: bool = True) -> list[StepOutput]:
    """Represent, then K dynamics steps; predict at every step (K+1 outputs)."""
    state = model.represent_t(tape, observations)
    mean, log_std, value = model.predict_t(tape, state)
    out = [StepOutput(mean, log_std, value, None, state)]
    for k in range(actions.shape[1]):
        reward, state = model.dynamics_t(tape, state, actions[:, k])
        if halve_dynamics_gradient:
            state = nn.scale_gradient(state, 0.5)
        mean, log_std, value = model.predict_t(tape, state)
        out.append(StepOutput(mean, log_std, value, reward, state))
    return out


def total_loss(outputs: list[StepOutput], batch: Batch, config: TrainConfig, model: MuZeroModel,
               tape: Tape) -> tuple[LossBreakdown, Var]:
    """Importance-weighted batch loss. Steps after the first are scaled by 1/K."""
    bsz = batch.weights.shape[0]
    w = batch.weights / bsz
    k_total = len(outputs) - 1
    terms: dict[str, list[Var]] = {"policy": [], "value": [], "reward": [], "entropy": []}
    for k, step in enumerate(outputs):
        scale = 1.0 if k == 0 else 1.0 / k_total
        ws = w * scale
        mask = batch.policy_mask[:, k]
        terms["value"].append(nn.mul(cross_entropy_t(step.value_logits, encode_target(batch.value_targets[:, k])), ws))
        if step.reward_logits is not None:
            terms["reward"].append(nn.mul(cross_entropy_t(step.reward_logits, encode_target(batch.reward_targets[:, k])), ws))
        if mask.any():
            logp = gaussian_logpdf_t(step.mean, step.log_std, batch.root_actions[:, k])
            pol = policy_term(logp, batch.log_counts[:, k], batch.action_mask[:, k], config.tau,
                              config.policy_gradient)
            terms["policy"].append(nn.mul(pol, ws * mask))
            terms["entropy"].append(nn.mul(entropy_t(step.log_std), ws * mask))

    summed = {}
    for name, parts in terms.items():
        if parts:
            summed[name] = nn.sum_(nn.concat([nn.reshape(p, (1, bsz)) for p in parts], axis=0))
        else:
            summed[name] = tape.constant(0.0)
    l2_parts = [nn.sum_(nn.square(tape.param(model.params, name))) for name in model.params.names()]
    summed["l2"] = nn.sum_(nn.concat([nn.reshape(p, (1,)) for p in l2_parts], axis=0))
    total = nn.add(nn.add(nn.add(summed["reward"], summed["value"]), summed["policy"]),
                   nn.add(nn.mul(summed["entropy"], config.entropy_weight),
                          nn.mul(summed["l2"], config.l2_weight)))
    values = {name: float(v.value) for name, v in summed.items()}
    for name, v in values.items():
        if not math.isfinite(v):
            raise TrainingError(f"non-finite {name} loss")
    breakdown = LossBreakdown(total=float(total.value), **values)
    return breakdown, total


class Trainer:
    """Owns the live parameters; the only writer of model weights."""

    def __init__(self, model: MuZeroModel, config: TrainConfig | None = None):
        self.model = model
        self.config = config or TrainConfig()
        self.adam = Adam()
        self.step = 0

    def train_step(self, samples: Sequence[TrainingSample]) -> tuple[LossBreakdown, np.ndarray]:
        batch = collate(samples)
        tape = Tape()
        outputs = unroll_and_predict(self.model, tape, batch.observations, batch.actions)
        breakdown, total = total_loss(outputs, batch, self.config, self.model, tape)
        recomposed = breakdown.recomposed(self.config.entropy_weight, self.config.l2_weight)
        assert abs(recomposed - breakdown.total) <= 1e-9 * max(1.0, abs(breakdown.total))
        tape.backward(total)
        self.adam.step(self.model.params, self.config.learning_rate)
        self.step += 1
        predicted = decode_scalar(outputs[0].value_logits.value)
        priorities = np.abs(predicted - batch.value_targets[:, 0]) + PRIORITY_FLOOR
        return breakdown, priorities


# ---------------------------------------------------------------------------
# estimator of KL(pi || reference) from samples of pi


def kl_estimator(policy: GaussianPolicy, reference: GaussianPolicy | Callable[[np.ndarray], np.ndarray],
                 n: int, rng: np.random.Generator) -> tuple[float, float]:
    """Sample mean of log pi(a) - log ref(a) over n draws a ~ pi.

    Returns (mean, variance of that mean), the latter estimated as the
    sample variance of the terms divided by n.
    """
    a = policy.mean + policy.std * rng.standard_normal((n, policy.mean.size))
    logp = gaussian_logpdf_batch(a, policy.mean, policy.log_std)
    if isinstance(reference, GaussianPolicy):
        logr = gaussian_logpdf_batch(a, reference.mean, reference.log_std)
    else:
        logr = np.asarray(reference(a), dtype=np.float64)
    terms = logp - logr
    return float(terms.mean()), float(terms.var(ddof=1) / n)


def gaussian_kl(p: GaussianPolicy, q: GaussianPolicy) -> float:
    """Closed-form KL(p || q) for diagonal Gaussians."""
    var_p, var_q = p.std ** 2, q.std ** 2
    return float(np.sum(q.log_std - p.log_std + (var_p + (p.mean - q.mean) ** 2) / (2 * var_q) - 0.5))
