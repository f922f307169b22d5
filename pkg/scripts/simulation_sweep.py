"""Greedy evaluation of one checkpoint at several simulation budgets.

    python scripts/simulation_sweep.py runs/cartpole/checkpoint_15000.npz --env cartpole

Writes <checkpoint>.sim_sweep.json with mean/std reward per budget. On the
bandit env (``--env bandit``) the known-reward oracle model is also searched
so the trend can be compared against an exact model.
"""
import argparse
import json
from pathlib import Path

import numpy as np

from cmuzero.envs import bandit_reward, make_env
from cmuzero.mcts import SearchConfig
from cmuzero.model import KnownRewardModel
from cmuzero.pipeline import load_checkpoint
from cmuzero.selfplay import evaluate


def sweep(model, env_key, sims, episodes, seed):
    rows = []
    for m in sims:
        search = SearchConfig(num_simulations=m, temperature=0.0)
        returns = evaluate(make_env(env_key), model, search, episodes, np.random.default_rng(seed))
        rows.append({"simulations": m, "mean": float(np.mean(returns)), "std": float(np.std(returns))})
        print(f"  sims {m:4d}: mean {rows[-1]['mean']:.3f} std {rows[-1]['std']:.3f}", flush=True)
    return rows


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("checkpoint")
    p.add_argument("--env", default="cartpole")
    p.add_argument("--sims", type=int, nargs="+", default=[5, 50])
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    model, meta = load_checkpoint(args.checkpoint)
    print(f"{args.checkpoint} (step {meta.get('step')})")
    result = {"checkpoint": args.checkpoint, "env": args.env, "episodes": args.episodes,
              "learned": sweep(model, args.env, args.sims, args.episodes, args.seed)}
    if args.env == "bandit":
        print("known-reward model")
        result["oracle"] = sweep(KnownRewardModel(bandit_reward), "bandit", args.sims, args.episodes, args.seed)
    out = Path(args.checkpoint).with_suffix(".sim_sweep.json")
    out.write_text(json.dumps(result, indent=2) + "\n")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
