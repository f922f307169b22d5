"""Training run orchestration: actors, trainer, evaluation, metrics, checkpoints.

Output directory layout::

    config.resolved.json   the full config with defaults filled in
    train_metrics.csv      one row per training step (TRAIN_FIELDS)
    eval_metrics.csv       one row per evaluation (EVAL_FIELDS)
    checkpoint_<step>.npz  parameters plus model metadata

With one actor the run is fully deterministic: acting and training interleave
in a single thread on a fixed schedule. With more actors, actors run in
threads and the trainer runs in the calling thread.
"""
from __future__ import annotations

import csv
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfg
from .config import RunConfig
from .envs import make_env, max_transformed_value
from .model import SUPPORT_MAX, MuZeroModel
from .nn import ParameterStore, TrainingError
from .replay import ReplayBuffer
from .selfplay import ActorStats, SnapshotSlot, actor_loop, evaluate, play_episode
from .training import Trainer

log = logging.getLogger(__name__)

TRAIN_FIELDS = ["step", "env_steps", "episodes", "total", "policy", "value", "reward",
                "entropy", "l2", "buffer_episodes", "wall_time"]
EVAL_FIELDS = ["step", "env_steps", "mean", "std", "min", "max", "episodes"]


@dataclass
class RunSummary:
    steps: int = 0
    env_steps: int = 0
    evaluations: list = field(default_factory=list)  # (step, mean reward)
    stopped_early: bool = False
    last_checkpoint: str | None = None
    actor_errors: int = 0

    @property
    def best_eval(self) -> float:
        return max((m for _, m in self.evaluations), default=float("nan"))


def checkpoint_meta(model: MuZeroModel, env_key: str, step: int) -> dict:
    return {**model.meta(), "env": env_key, "step": step}


def load_checkpoint(path: str | Path) -> tuple[MuZeroModel, dict]:
    """Rebuild the model described by a checkpoint header."""
    from .model import ModelConfig
    store, meta = ParameterStore.load(path)
    try:
        mc = ModelConfig(**meta["model"])
        obs_dim, action_dim = int(meta["obs_dim"]), int(meta["action_dim"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"{path}: checkpoint lacks model metadata ({exc})") from exc
    return MuZeroModel(obs_dim, action_dim, mc, params=store), meta


class Run:
    def __init__(self, config: RunConfig):
        self.config = config
        self.out = Path(config.out_dir)
        env = make_env(config.env, **config.env_params)
        self.env_spec = env.spec
        self.model = MuZeroModel(env.spec.obs_dim, env.spec.action_dim, config.model,
                                 rng=cfg.component_rng(config.seed, cfg.SEED_INIT))
        self.trainer = Trainer(self.model, config.train)
        self.buffer = ReplayBuffer(config.replay, discount=config.search.discount)
        self.slot = SnapshotSlot(self.model.params)
        self.train_rng = cfg.component_rng(config.seed, cfg.SEED_TRAINER)
        self.summary = RunSummary()
        self._evals = 0
        self._t0 = time.monotonic()
        bound = max_transformed_value(env.spec.reward_bound, config.search.discount,
                                     env.spec.max_steps)
        if bound > SUPPORT_MAX:
            log.warning("returns up to h=%.2f exceed the value support (+-%d); targets will be clipped",
                        bound, SUPPORT_MAX)

    # -- io ----------------------------------------------------------------

    def _open_outputs(self):
        self.out.mkdir(parents=True, exist_ok=True)
        self.config.dump(self.out / "config.resolved.json")
        self._train_fh = open(self.out / "train_metrics.csv", "w", newline="")
        self._eval_fh = open(self.out / "eval_metrics.csv", "w", newline="")
        self._train_csv = csv.DictWriter(self._train_fh, TRAIN_FIELDS)
        self._eval_csv = csv.DictWriter(self._eval_fh, EVAL_FIELDS)
        self._train_csv.writeheader()
        self._eval_csv.writeheader()
        self._train_fh.flush()
        self._eval_fh.flush()

    def _close_outputs(self):
        self._train_fh.close()
        self._eval_fh.close()

    def save_checkpoint(self, params: ParameterStore | None = None) -> str:
        step = self.trainer.step
        path = self.out / f"checkpoint_{step}.npz"
        (params or self.model.params).save(path, checkpoint_meta(self.model, self.config.env, step))
        self.summary.last_checkpoint = str(path)
        return str(path)

    # -- pieces ------------------------------------------------------------

    def temperature(self) -> float:
        return self.config.actor.temperature(self.trainer.step, self.config.total_steps)

    def evaluate(self) -> float:
        c = self.config
        rng = cfg.component_rng(c.seed, cfg.SEED_EVAL, self._evals)
        self._evals += 1
        model = self.model.with_params(self.model.params.snapshot())
        env = make_env(c.env, **c.env_params)
        returns = evaluate(env, model, c.search, c.eval_episodes, rng)
        mean = float(np.mean(returns))
        self._eval_csv.writerow({"step": self.trainer.step, "env_steps": self.buffer.total_transitions,
                                 "mean": mean, "std": float(np.std(returns)),
                                 "min": float(np.min(returns)), "max": float(np.max(returns)),
                                 "episodes": len(returns)})
        self._eval_fh.flush()
        self.summary.evaluations.append((self.trainer.step, mean))
        log.info("step %d eval mean %.2f (min %.2f max %.2f)", self.trainer.step, mean,
                 min(returns), max(returns))
        return mean

    def ready_to_train(self) -> bool:
        c = self.config
        n = self.buffer.total_transitions
        return n >= c.min_buffer_transitions and self.trainer.step < c.train_steps_per_env_step * n

    def train_once(self) -> None:
        c = self.config
        samples = self.buffer.sample_batch(c.train.batch_size, c.train.num_unroll, self.train_rng)
        last_good = self.model.params.copy()
        try:
            breakdown, priorities = self.trainer.train_step(samples)
        except TrainingError:
            path = self.out / f"checkpoint_{self.trainer.step}.npz"
            last_good.save(path, checkpoint_meta(self.model, c.env, self.trainer.step))
            self.summary.last_checkpoint = str(path)
            log.error("non-finite loss at step %d; last good parameters saved to %s",
                      self.trainer.step, path)
            raise
        self.buffer.update_priorities([s.sample_id for s in samples], priorities)
        row = {"step": self.trainer.step, "env_steps": self.buffer.total_transitions,
               "episodes": self.buffer.total_episodes, "buffer_episodes": len(self.buffer),
               "wall_time": round(time.monotonic() - self._t0, 3)}
        row.update(breakdown.as_dict())
        self._train_csv.writerow(row)
        if self.trainer.step % c.publish_interval == 0:
            self.slot.publish(self.model.params)
            self._train_fh.flush()

    def after_step(self) -> bool:
        """Periodic evaluation and checkpointing; True requests an early stop."""
        c = self.config
        step = self.trainer.step
        if step % c.eval_interval == 0 or step == c.total_steps:
            mean = self.evaluate()
            self.save_checkpoint()
            if c.target_score is not None and mean >= c.target_score:
                log.info("target score %.2f reached at step %d", c.target_score, step)
                self.summary.stopped_early = True
                return True
        return False

    # -- loops -------------------------------------------------------------

    def _run_synchronous(self) -> None:
        c = self.config
        rng = cfg.component_rng(c.seed, cfg.SEED_ACTOR, 0)
        env = make_env(c.env, **c.env_params)
        template = self.model
        while self.trainer.step < c.total_steps:
            if self.ready_to_train():
                self.train_once()
                if self.after_step():
                    return
                continue
            model = template.with_params(self.slot.fetch_latest().params)
            episode = play_episode(env, model, c.search, self.temperature(), rng,
                                   seed=int(rng.integers(0, 2**31)))
            self.buffer.add(episode)

    def _run_threaded(self) -> None:
        c = self.config
        stop = threading.Event()
        lead = c.min_buffer_transitions + c.actor_lead_transitions

        def may_play():
            return self.buffer.total_transitions < lead + self.trainer.step / c.train_steps_per_env_step

        stats = [ActorStats() for _ in range(c.actor.num_actors)]
        threads = []
        for i in range(c.actor.num_actors):
            t = threading.Thread(
                target=actor_loop, name=f"actor-{i}", daemon=True,
                args=(lambda: make_env(c.env, **c.env_params), self.model, self.slot, self.buffer,
                      c.actor, cfg.component_rng(c.seed, cfg.SEED_ACTOR, i), stop, self.temperature,
                      stats[i], may_play))
            t.start()
            threads.append(t)
        try:
            while self.trainer.step < c.total_steps:
                if not self.ready_to_train():
                    time.sleep(0.005)
                    continue
                self.train_once()
                if self.after_step():
                    break
        finally:
            stop.set()
            for t in threads:
                t.join()
            self.summary.actor_errors = sum(s.errors for s in stats)

    def run(self) -> RunSummary:
        self._open_outputs()
        try:
            if self.config.total_steps == 0:
                self.save_checkpoint()
                return self.summary
            try:
                if self.config.synchronous:
                    self._run_synchronous()
                else:
                    self._run_threaded()
            except KeyboardInterrupt:
                log.warning("interrupted; writing final checkpoint")
                self.save_checkpoint()
                raise
            if self.summary.last_checkpoint != str(self.out / f"checkpoint_{self.trainer.step}.npz"):
                self.save_checkpoint()
        finally:
            self.summary.steps = self.trainer.step
            self.summary.env_steps = self.buffer.total_transitions
            self._close_outputs()
        return self.summary


def train(config: RunConfig) -> RunSummary:
    return Run(config).run()
