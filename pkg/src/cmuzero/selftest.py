"""Fast property suites behind ``cmuzero selftest``.

Each suite resolves the functions it checks through their modules at call
time, so a patched (mutated) implementation is what gets tested.
"""
from __future__ import annotations

import math
import time

import numpy as np

from . import envs, mcts, model, nn, replay, training


class SuiteFailure(AssertionError):
    pass


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise SuiteFailure(msg)


def suite_transforms() -> str:
    _check(abs(float(model.transform_scalar(3.0)) - 1.003) < 1e-12, "h(3) != 1.003")
    _check(abs(float(model.transform_scalar(-3.0)) + 1.003) < 1e-12, "h(-3) != -1.003")
    hi = float(model.inverse_transform_scalar(10.0))
    x = np.linspace(-hi, hi, 2001)
    y = model.transform_scalar(x)
    _check(bool(np.all(np.diff(y) > 0)), "transform is not increasing")
    err = np.max(np.abs(model.inverse_transform_scalar(y) - x))
    _check(err < 1e-6, f"inverse(transform(x)) error {err:.2e}")
    s = np.linspace(-10, 10, 4001)
    err2 = np.max(np.abs(model.support_to_scalar(model.scalar_to_support(s)) - s))
    _check(err2 < 1e-9, f"support roundtrip error {err2:.2e}")
    return f"roundtrip err {err:.1e}, support err {err2:.1e}"


def _fd_rel_err(f, x: np.ndarray, grad: np.ndarray, eps: float = 1e-6) -> float:
    num = np.zeros_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + eps
        up = f()
        x.flat[i] = old - eps
        down = f()
        x.flat[i] = old
        num.flat[i] = (up - down) / (2 * eps)
    return float(np.max(np.abs(num - grad)) / max(1e-8, np.max(np.abs(num))))


def suite_gradients() -> str:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(5):
        # small dense network
        store = nn.ParameterStore()
        net = nn.DenseNetwork(nn.DenseNetworkSpec((3, 5, 2), output_activation="tanh"), "net")
        net.init(store, rng)
        x = rng.normal(size=(4, 3))

        def f_net():
            return float(np.sum(net(store, x) ** 2))

        tape = nn.Tape()
        out = nn.sum_(nn.square(net.forward(store, x, tape)))
        store.zero_grad()
        tape.backward(out)
        for name in store.names():
            worst = max(worst, _fd_rel_err(f_net, store[name], store.grads[name].copy()))

        # policy loss, score-function gradient vs the squared-residual oracle
        mean = rng.normal(size=(2, 1)) * 0.3
        log_std = rng.normal(size=(2, 1)) * 0.3
        acts = rng.uniform(-1, 1, size=(2, 4, 1))
        counts = rng.integers(1, 20, size=(2, 4)).astype(float)
        mask = np.ones((2, 4), dtype=bool)

        def f_pol():
            lp = model.gaussian_logpdf_batch(acts, mean[:, None, :], log_std[:, None, :])
            return float(np.sum(0.5 * np.mean((lp - np.log(counts)) ** 2, axis=-1)))

        tape = nn.Tape()
        m_v, s_v = tape.constant(mean), tape.constant(log_std)
        lp = training.gaussian_logpdf_t(m_v, s_v, acts)
        tape.backward(nn.sum_(training.policy_term(lp, np.log(counts), mask, 1.0, "score")))
        worst = max(worst, _fd_rel_err(f_pol, mean, np.array(m_v.grad)),
                    _fd_rel_err(f_pol, log_std, np.array(s_v.grad)))
    _check(worst < 1e-4, f"max relative error {worst:.2e}")
    return f"max rel err {worst:.1e}"


def suite_widening() -> str:
    checked = 0
    for seed in range(5):
        cfg = mcts.SearchConfig(num_simulations=128, seed=seed)
        violations = []

        def observer(node, info):
            nonlocal checked
            if node is None:
                return
            checked += 1
            limit = mcts.widening_threshold(node.visit_count, cfg.pw_constant, cfg.pw_exponent)
            n_children = len(node.edges)
            if info != (n_children < limit):
                violations.append("widen decision disagrees with threshold")
            if n_children > max(1, math.ceil(limit)):
                violations.append(f"{n_children} children at n={node.visit_count}")

        m = model.KnownRewardModel(envs.bandit_reward)
        result = mcts.run_search(np.zeros(1), m, cfg, observer=observer)
        _check(not violations, violations[0] if violations else "")
        root = result.root
        _check(len(root.edges) <= math.ceil(math.sqrt(root.visit_count)) + 1, "root too wide")
        _check(sum(e.N for e in root.edges) == cfg.num_simulations, "visit counts not conserved")
    return f"{checked} decisions checked"


def suite_kl() -> str:
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(5):
        p = model.GaussianPolicy(rng.normal(size=1), rng.normal(size=1) * 0.3)
        q = model.GaussianPolicy(rng.normal(size=1), rng.normal(size=1) * 0.3)
        mean, var = training.kl_estimator(p, q, 10_000, rng)
        z = abs(mean - training.gaussian_kl(p, q)) / math.sqrt(var)
        worst = max(worst, z)
    _check(worst < 4.0, f"estimate {worst:.2f} standard errors from closed form")
    return f"max |z| {worst:.2f}"


def suite_replay() -> str:
    rng = np.random.default_rng(2)
    probs = replay.sampling_probabilities([1.0, 3.0], 1.0)
    _check(np.allclose(probs, [0.25, 0.75]), "sampling probabilities")
    buf = replay.ReplayBuffer(replay.ReplayConfig(td_steps=1))
    for p in (1.0, 3.0):
        tr = replay.Transition(np.zeros(1), np.zeros(1), 0.0, 0.0, [np.zeros(1)], [1], True)
        buf.add(replay.Episode([tr], priorities=np.array([p])))
    drawn, _ = buf.sample_indices(20_000, rng)
    freq = np.mean([ep.episode_id == 1 for ep, _, _ in drawn])
    _check(abs(freq - 0.75) < 0.02, f"empirical frequency {freq:.3f} vs 0.75")
    batch = buf.sample_batch(64, 1, rng, beta=0.0)
    _check(all(s.weight == 1.0 for s in batch), "beta=0 weights not 1")
    return f"freq {freq:.3f}"


SUITES = {
    "transforms": suite_transforms,
    "gradients": suite_gradients,
    "widening": suite_widening,
    "kl": suite_kl,
    "replay": suite_replay,
}


def run_all(verbose: bool = False) -> list[tuple[str, bool, str]]:
    results = []
    for name, suite in SUITES.items():
        t0 = time.perf_counter()
        try:
            detail = suite()
            ok = True
        except Exception as exc:  # any failure marks the suite failed
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        dt = time.perf_counter() - t0
        results.append((name, ok, detail))
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'} {name:<11} {dt:6.2f}s  {detail}")
    return results
