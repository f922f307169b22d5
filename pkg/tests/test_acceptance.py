"""Acceptance gate. Each test records one PASS/FAIL line, printed in the
terminal summary under "acceptance criteria"."""
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from cmuzero import nn
from cmuzero.envs import CartPoleEnv, bandit_reward
from cmuzero.mcts import SearchConfig, run_search
from cmuzero.model import (GaussianPolicy, KnownRewardModel, MuZeroModel, inverse_transform_scalar,
                           scalar_to_support, support_to_scalar, transform_scalar)
from cmuzero.replay import Episode, ReplayBuffer, Transition
from cmuzero.training import gaussian_kl, gaussian_logpdf_t, kl_estimator, policy_term

ROOT = Path(__file__).resolve().parents[1]
CARTPOLE_SUMMARY = ROOT / "results" / "fig2_cartpole" / "summary.json"


def _kl_pairs(rng, n_random=10):
    pairs = [(GaussianPolicy(np.zeros(1), np.zeros(1)), GaussianPolicy(np.ones(1), np.zeros(1)))]
    for _ in range(n_random):
        pairs.append((GaussianPolicy(rng.uniform(-1, 1, 1), rng.uniform(-1, 0.5, 1)),
                      GaussianPolicy(rng.uniform(-1, 1, 1), rng.uniform(-1, 0.5, 1))))
    return pairs


def _kl_z_scores(seed, n=100_000):
    rng = np.random.default_rng(seed)
    zs = []
    for p, q in _kl_pairs(rng):
        mean, var = kl_estimator(p, q, n, rng)
        zs.append((mean - gaussian_kl(p, q)) / math.sqrt(var))
    return zs


def test_c1_kl_estimator_unbiased(report):
    t0 = time.perf_counter()
    zs = np.abs(_kl_z_scores(20240601))
    dt = time.perf_counter() - t0
    # calibration: the z-scores of an unbiased estimator are ~N(0, 1), so "all 11
    # within 3 SE" fails by chance about 3% of the time for any fixed seed
    pooled = np.concatenate([_kl_z_scores(1000 + s) for s in range(100)])
    ok = zs.max() < 3.0 and dt < 10
    report(1, ok, f"N(0,1)||N(1,1) |z|={zs[0]:.2f}; max |z| over 11 pairs {zs.max():.2f} (<3); {dt:.1f}s. "
                  f"calibration over 1100 pairs: mean z {pooled.mean():+.3f}, sd {pooled.std():.3f}")
    assert ok


def test_c2_estimator_variance_decay(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    p, q = GaussianPolicy(np.zeros(1), np.zeros(1)), GaussianPolicy(np.ones(1), np.zeros(1))
    repeats = 300
    means = {n: [] for n in (10_000, 100_000)}
    reported = {n: [] for n in means}
    for n in means:
        for _ in range(repeats):
            m, v = kl_estimator(p, q, n, rng)
            means[n].append(m)
            reported[n].append(v)
    empirical = np.var(means[10_000], ddof=1) / np.var(means[100_000], ddof=1)
    analytic = np.mean(reported[10_000]) / np.mean(reported[100_000])
    dt = time.perf_counter() - t0
    ok = 5 <= empirical <= 20 and 5 <= analytic <= 20 and dt < 30
    report(2, ok, f"var(1e4)/var(1e5): across {repeats} repeats {empirical:.2f}, "
                  f"estimator-reported {analytic:.2f} (in [5, 20]); {dt:.1f}s")
    assert ok


def _policy_fd(seed, mode):
    rng = np.random.default_rng(seed)
    b, m = 2, int(rng.integers(1, 8))
    mean = rng.uniform(-0.9, 0.9, size=(b, 1))
    log_std = rng.uniform(-2.0, 1.0, size=(b, 1))
    acts = np.clip(mean[:, None] + np.exp(log_std)[:, None] * rng.normal(size=(b, m, 1)), -1, 1)
    log_counts = np.log(rng.integers(1, 50, size=(b, m)).astype(float))
    mask = np.ones((b, m), dtype=bool)
    tau = float(rng.uniform(0.25, 2.0))

    def residual():
        z = (acts - mean[:, None]) / np.exp(log_std)[:, None]
        logp = np.sum(-0.5 * z * z - log_std[:, None] - 0.5 * math.log(2 * math.pi), -1)
        return logp - tau * log_counts

    # forward loss for the plain derivative, half mean squared residual for the
    # score form, half the residual variance (log Z at its least-squares value) when centered
    oracle = {"pathwise": lambda: np.sum(residual().mean(-1)),
              "score": lambda: np.sum(0.5 * (residual() ** 2).mean(-1)),
              "centered": lambda: np.sum(0.5 * residual().var(-1))}[mode]
    tape = nn.Tape()
    mv, sv = tape.constant(mean), tape.constant(log_std)
    tape.backward(nn.sum_(policy_term(gaussian_logpdf_t(mv, sv, acts), log_counts, mask, tau, mode)))
    worst = 0.0
    for x, g in ((mean, mv.grad), (log_std, sv.grad)):
        num = np.zeros_like(x)
        for i in range(x.size):
            old = x.flat[i]
            x.flat[i] = old + 1e-6
            up = oracle()
            x.flat[i] = old - 1e-6
            down = oracle()
            x.flat[i] = old
            num.flat[i] = (up - down) / 2e-6
        worst = max(worst, float(np.max(np.abs(num - g)) / max(np.max(np.abs(num)), 1e-8)))
    return worst


def test_c3_policy_gradient_correctness(report):
    t0 = time.perf_counter()
    worst = {mode: max(_policy_fd(seed, mode) for seed in range(100)) for mode in ("pathwise", "score", "centered")}
    dt = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and dt < 30
    report(3, ok, f"100 instances, max rel err: plain {worst['pathwise']:.1e}, score-function "
                  f"{worst['score']:.1e}, centered {worst['centered']:.1e} (<1e-4); {dt:.1f}s")
    assert ok


def test_c4_transform_roundtrips(report):
    t0 = time.perf_counter()
    hi = float(inverse_transform_scalar(10.0))
    x = np.linspace(-hi, hi, 10_000)
    err1 = float(np.max(np.abs(inverse_transform_scalar(transform_scalar(x)) - x)))
    y = np.linspace(-10, 10, 10_000)
    err2 = float(np.max(np.abs(support_to_scalar(scalar_to_support(y)) - y)))
    dt = time.perf_counter() - t0
    ok = err1 < 1e-6 and err2 < 1e-9 and dt < 5
    report(4, ok, f"inverse(h(x)) err {err1:.1e} (<1e-6), support err {err2:.1e} (<1e-9); {dt:.2f}s")
    assert ok


def test_c5_widening_invariant(report):
    t0 = time.perf_counter()
    problems, decisions, max_root_excess = [], 0, -math.inf
    for seed in range(50):
        cfg = SearchConfig(num_simulations=512, pw_constant=1.0, pw_exponent=0.5, seed=seed)
        if seed % 2:
            model, obs = KnownRewardModel(bandit_reward), np.zeros(1)
        else:
            env = CartPoleEnv()
            model = MuZeroModel(env.spec.obs_dim, 1, rng=np.random.default_rng(seed))
            obs = env.reset(seed)

        def observer(node, widened):
            nonlocal decisions, max_root_excess
            if node is None:
                root = widened[0][0]  # after a backup the second argument is the path
                max_root_excess = max(max_root_excess,
                                      len(root.edges) - math.ceil(math.sqrt(root.visit_count)))
                return
            decisions += 1
            n, k = node.visit_count, len(node.edges)
            # widen exactly when |A| < C n^alpha, and never hold more than max(1, ceil(C n^alpha))
            if widened != (k < n ** 0.5) or k + widened > max(1, math.ceil(n ** 0.5)):
                problems.append((seed, n, k))

        result = run_search(obs, model, cfg, observer=observer)
        if result.root.visit_count != 513:
            problems.append((seed, "visit conservation"))
    dt = time.perf_counter() - t0
    ok = not problems and max_root_excess <= 1 and dt < 60
    report(5, ok, f"50 searches x 512 sims, {decisions} decisions, {len(problems)} violations, "
                  f"max root children - ceil(sqrt n) = {max_root_excess} (<=1); {dt:.1f}s")
    assert ok


def test_c6_search_as_optimizer(report):
    t0 = time.perf_counter()
    grid = np.linspace(-1, 1, 20_001)
    optimum = float(grid[np.argmax([bandit_reward(a) for a in grid])])
    errors = {}
    for sims in (8, 64, 512):
        errs = []
        for seed in range(20):
            r = run_search(np.zeros(1), KnownRewardModel(bandit_reward), SearchConfig(num_simulations=sims, seed=seed))
            mean_action = float(np.average([a[0] for a in r.actions], weights=r.visit_counts))
            errs.append(abs(mean_action - optimum))
        errors[sims] = float(np.mean(errs))
    dt = time.perf_counter() - t0
    monotone = errors[8] >= errors[64] >= errors[512]
    ok = errors[512] < 0.1 and monotone and dt < 300
    report(6, ok, f"a*={optimum:.3f}; mean |error| at 8/64/512 sims: "
                  f"{errors[8]:.3f}/{errors[64]:.3f}/{errors[512]:.3f} (<0.1, non-increasing); {dt:.1f}s")
    assert ok


def test_c7_cartpole_integration(report):
    """Reads the per-seed results written by scripts/fig2_cartpole.py; the
    runs themselves take hours on one core and are not repeated here."""
    if os.environ.get("CMUZERO_SLOW") == "1":
        import subprocess
        import sys
        subprocess.run([sys.executable, str(ROOT / "scripts" / "fig2_cartpole.py")], check=True)
    if not CARTPOLE_SUMMARY.exists():
        report(7, "NOT RUN", "no recorded runs; run scripts/fig2_cartpole.py (or CMUZERO_SLOW=1)")
        pytest.skip("cart-pole runs not recorded")
    summary = json.loads(CARTPOLE_SUMMARY.read_text())
    runs = summary["runs"]
    hits = [r for r in runs if r["first_step_at_target"] is not None and r["first_step_at_target"] <= 15000]
    ok = len(runs) >= 5 and len(hits) >= 3
    detail = ", ".join(f"seed {r['seed']}: best {r['best_eval']:.0f}"
                       + (f" @ {r['first_step_at_target']}" if r["first_step_at_target"] else "") for r in runs)
    report(7, ok, f"{len(hits)}/{len(runs)} seeds reach >=950 within 15k steps (need 3/5) "
                  f"[{detail}]; {summary.get('hardware', '')}")
    assert ok


def test_c8_documented_non_reproducible(report):
    report(8, "N/A", "baseline comparison and simulator-exact scores are out of scope; see README")


def test_c9_prioritized_replay(report):
    t0 = time.perf_counter()
    buf = ReplayBuffer()
    for p in (1.0, 3.0):
        tr = Transition(np.zeros(1), np.zeros(1), 0.0, 0.0, [np.zeros(1)], [1], True)
        buf.add(Episode([tr], priorities=np.array([p])))
    drawn, _ = buf.sample_indices(100_000, np.random.default_rng(9))
    freq = np.bincount([ep.episode_id for ep, _, _ in drawn], minlength=2) / 100_000
    w = [s.weight for s in buf.sample_batch(1000, 1, np.random.default_rng(10), beta=0.0)]
    dt = time.perf_counter() - t0
    ok = np.max(np.abs(freq - [0.25, 0.75])) < 0.01 and all(x == 1.0 for x in w) and dt < 10
    report(9, ok, f"frequencies {freq[0]:.4f}/{freq[1]:.4f} vs 0.25/0.75 (<0.01); beta=0 weights all 1: "
                  f"{all(x == 1.0 for x in w)}; {dt:.1f}s")
    assert ok
