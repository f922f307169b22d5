"""Command-line entry point: ``cmuzero {train,eval,plan,selftest}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .envs import make_env
from .mcts import SearchConfig, run_search
from .nn import ConfigurationError, TrainingError
from .selfplay import evaluate

log = logging.getLogger("cmuzero")


def cmd_train(args) -> int:
    from .pipeline import train
    try:
        config = RunConfig.load(args.config)
        if args.seed is not None:
            config.seed = args.seed
        if args.out is not None:
            config.out_dir = args.out
        if args.steps is not None:
            config.total_steps = args.steps
            RunConfig.from_dict(config.to_dict())  # revalidate
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        summary = train(config)
    except TrainingError as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        return 130
    print(json.dumps({"steps": summary.steps, "env_steps": summary.env_steps,
                      "final_eval": summary.evaluations[-1][1] if summary.evaluations else None,
                      "best_eval": summary.best_eval if summary.evaluations else None,
                      "stopped_early": summary.stopped_early,
                      "checkpoint": summary.last_checkpoint}))
    return 0


def _load_for_env(checkpoint: str, env_key: str):
    from .pipeline import load_checkpoint
    model, meta = load_checkpoint(checkpoint)
    env = make_env(env_key)
    if (model.obs_dim, model.action_dim) != (env.spec.obs_dim, env.spec.action_dim):
        raise ConfigurationError(
            f"checkpoint expects obs/action dims {(model.obs_dim, model.action_dim)} but env "
            f"{env_key!r} has {(env.spec.obs_dim, env.spec.action_dim)}"
            f" (checkpoint was trained on {meta.get('env', 'unknown')!r})")
    model = model.with_params(model.params.snapshot())
    return model, env


def cmd_eval(args) -> int:
    try:
        model, env = _load_for_env(args.checkpoint, args.env)
    except (ConfigurationError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    search = SearchConfig(num_simulations=args.simulations, discount=args.discount, temperature=0.0)
    rng = np.random.default_rng(args.seed)
    returns = evaluate(env, model, search, args.episodes, rng)
    summary = {"checkpoint": str(args.checkpoint), "env": args.env, "episodes": args.episodes,
               "simulations": args.simulations, "seed": args.seed,
               "mean": float(np.mean(returns)), "std": float(np.std(returns)), "returns": returns}
    print(f"mean {summary['mean']:.4f} std {summary['std']:.4f} over {args.episodes} episodes")
    out = Path(args.output) if args.output else Path(args.checkpoint).with_suffix(
        f".eval_sims{args.simulations}.json")
    out.write_text(json.dumps(summary, indent=2) + "\n")
    return 0


def cmd_plan(args) -> int:
    """Run one search from a reset observation and print the root statistics."""
    try:
        model, env = _load_for_env(args.checkpoint, args.env)
    except (ConfigurationError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    obs = env.reset(args.seed)
    search = SearchConfig(num_simulations=args.simulations, discount=args.discount, temperature=0.0)
    result = run_search(obs, model, search, np.random.default_rng(args.seed))
    order = np.argsort(result.visit_counts)[::-1]
    print(f"root value {result.value:.4f}; chosen action {np.round(result.action, 4).tolist()}")
    for i in order:
        print(f"  action {np.round(result.actions[i], 4).tolist()}  visits {result.visit_counts[i]}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all
    results = run_all(verbose=True)
    return 0 if all(ok for _, ok, _ in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmuzero", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--steps", type=int, help="override total training steps")
    t.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "greedy evaluation of a checkpoint"),
                              ("plan", cmd_plan, "one search from a reset state")):
        e = sub.add_parser(name, help=help_)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--env", required=True)
        e.add_argument("--simulations", type=int, default=50)
        e.add_argument("--discount", type=float, default=SearchConfig.discount)
        e.add_argument("--seed", type=int, default=0)
        if name == "eval":
            e.add_argument("--episodes", type=int, default=10)
            e.add_argument("--output", help="summary JSON path")
        e.set_defaults(func=func)

    s = sub.add_parser("selftest", help="fast property suites")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
