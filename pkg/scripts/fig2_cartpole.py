"""Cart-pole training curves over several seeds.

Trains the default cart-pole config once per seed and writes
results/fig2_cartpole/summary.json with, per seed, the eval curve, the best
greedy eval and the first training step at which the target was reached.
The summary is rewritten after every seed so partial results survive.

    python scripts/fig2_cartpole.py --seeds 0 1 2 3 4
"""
import argparse
import csv
import json
import logging
import os
import platform
import time
from pathlib import Path

from cmuzero.config import RunConfig
from cmuzero.pipeline import train

ROOT = Path(__file__).resolve().parents[1]


def read_curve(path: Path) -> list[tuple[int, float]]:
    with open(path) as fh:
        return [(int(r["step"]), float(r["mean"])) for r in csv.DictReader(fh)]


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "cartpole.json"))
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--steps", type=int, help="override total training steps")
    p.add_argument("--out", default=str(ROOT / "results" / "fig2_cartpole"))
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary_path = out / "summary.json"
    runs = []
    for seed in args.seeds:
        config = RunConfig.load(args.config)
        config.seed = seed
        config.out_dir = str(out / f"seed_{seed}")
        if args.steps is not None:
            config.total_steps = args.steps
        target = config.target_score if config.target_score is not None else 950.0
        t0 = time.time()
        result = train(config)
        curve = read_curve(Path(config.out_dir) / "eval_metrics.csv")
        hit = next((step for step, mean in curve if mean >= target), None)
        runs.append({"seed": seed, "steps": result.steps, "env_steps": result.env_steps,
                     "best_eval": max(m for _, m in curve), "first_step_at_target": hit,
                     "target": target, "wall_time_s": round(time.time() - t0, 1),
                     "actor_errors": result.actor_errors, "curve": curve})
        print(f"seed {seed}: best {runs[-1]['best_eval']:.1f}, target reached at {hit}, "
              f"{runs[-1]['wall_time_s']:.0f}s", flush=True)
        summary_path.write_text(json.dumps({
            "config": str(args.config), "cpu_count": os.cpu_count(),
            "hardware": f"{platform.processor() or platform.machine()}, {os.cpu_count()} core(s)",
            "runs": runs}, indent=2) + "\n")


if __name__ == "__main__":
    main()
