import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmuzero.envs import bandit_reward
from cmuzero.mcts import (MinMaxStats, SearchConfig, SearchEdge, SearchNode, SearchResult, action_probabilities,
                          backup, choose_action, expand, make_node, normalize_log_densities, normalize_priors,
                          pucb_scores, pucb_select, run_search, visit_density_target, widen,
                          widening_threshold)
from cmuzero.model import GaussianPolicy, KnownRewardModel, MuZeroModel, ModelConfig, decode_scalar

STD_NORMAL = GaussianPolicy(np.zeros(1), np.zeros(1))


def node_with(log_priors, counts=None, qs=None):
    node = SearchNode(np.zeros(1), STD_NORMAL, 0.0)
    for i, lp in enumerate(log_priors):
        e = SearchEdge(np.array([0.1 * i]), STD_NORMAL)
        e.log_prior = lp
        if counts is not None:
            e.N = counts[i]
            e.Q = qs[i]
        node.edges.append(e)
    node.visit_count = 1 + sum(e.N for e in node.edges)
    return node


def bandit_model():
    return KnownRewardModel(bandit_reward)


# -- widening ----------------------------------------------------------------


def test_widening_threshold_examples():
    assert widening_threshold(0, 3.0, 0.7) == 0.0
    assert widening_threshold(16, 1.0, 0.5) == 4.0
    assert widening_threshold(10, 2.0, 0.4) == pytest.approx(5.0238, abs=1e-4)


def test_sampled_action_concentrates_at_clamped_std():
    node = SearchNode(np.zeros(1), GaussianPolicy(np.array([0.3]), np.array([-5.0])), 0.0)
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert abs(widen(node, rng).action[0] - 0.3) < 5 * math.exp(-5)


def test_sampled_action_is_clipped():
    node = SearchNode(np.zeros(1), GaussianPolicy(np.array([1.7]), np.array([-5.0])), 0.0)
    edge = widen(node, np.random.default_rng(0))
    assert edge.action[0] == 1.0 and edge.N == 0 and edge.Q == 0.0 and edge.child is None


# -- priors --------------------------------------------------------------------


def test_prior_normalization_examples():
    assert normalize_priors(node_with([0.0])) == [1.0]
    assert normalize_priors(node_with([-1.0, -1.0])) == pytest.approx([0.5, 0.5])
    p = normalize_priors(node_with(np.log([0.3989, 0.1])))
    assert p == pytest.approx([0.7996, 0.2004], abs=1e-4)


@given(st.lists(st.floats(-30, 5), min_size=1, max_size=8), st.floats(-20, 20))
def test_priors_invariant_to_density_scaling(logs, shift):
    a = normalize_log_densities(logs)
    b = normalize_log_densities(np.asarray(logs) + shift)
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)
    assert a.sum() == pytest.approx(1.0)


def test_vanishing_densities_fall_back_to_uniform():
    np.testing.assert_array_equal(normalize_log_densities([-np.inf, -np.inf]), [0.5, 0.5])


# -- selection -----------------------------------------------------------------


def test_unvisited_edges_follow_prior():
    node = node_with(np.log([0.2, 0.5, 0.3]), counts=[0, 0, 0], qs=[0, 0, 0])
    assert pucb_select(node, SearchConfig()) == 1


def test_value_dominates_under_equal_exploration():
    node = node_with([0.0, 0.0], counts=[2, 2], qs=[1.0, 0.0])
    assert pucb_select(node, SearchConfig()) == 0


def test_pucb_hand_example():
    node = node_with(np.log([0.8, 0.2]), counts=[3, 1], qs=[0.1, 0.5])
    bonus = 2.0 * (1.25 + math.log((4 + 19652 + 1) / 19652))
    expected = [0.1 + 0.8 * bonus / 4, 0.5 + 0.2 * bonus / 2]
    assert pucb_scores(node, SearchConfig()) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx([0.6001, 0.75005], abs=1e-4)
    assert pucb_select(node, SearchConfig()) == 1


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(-5, 0), st.integers(1, 20), st.floats(-3, 3)), min_size=1, max_size=6),
       st.floats(-10, 10))
def test_pucb_argmax_invariant_to_q_shift(edges, shift):
    lp, n, q = map(list, zip(*edges))
    a = node_with(lp, n, q)
    b = node_with(lp, n, [x + shift for x in q])
    sa, sb = pucb_scores(a, SearchConfig()), pucb_scores(b, SearchConfig())
    # scores shift uniformly, so the argmax moves only on float ties
    np.testing.assert_allclose(np.array(sb) - np.array(sa), shift, atol=1e-9)


def test_minmax_normalization():
    stats = MinMaxStats()
    assert stats.normalize(3.0) == 3.0
    for q in (1.0, 5.0):
        stats.update(q)
    assert stats.normalize(2.0) == 0.25


# -- expansion and backup -----------------------------------------------------------


def test_expand_makes_one_dynamics_call_and_one_edge():
    model = bandit_model()
    root = make_node(model.represent(None), model, np.random.default_rng(0))
    edge = root.edges[0]
    child = expand(edge, root, model, np.random.default_rng(1))
    assert model.dynamics_calls == 1 and len(child.edges) == 1
    assert edge.R == pytest.approx(bandit_reward(edge.action))
    with pytest.raises(RuntimeError):
        expand(edge, root, model, np.random.default_rng(1))


def test_expand_decodes_learned_reward():
    model = MuZeroModel(2, 1, ModelConfig(hidden_dim=4, width=8, depth=1), rng=np.random.default_rng(2))
    root = make_node(model.represent(np.ones(2)), model, np.random.default_rng(0))
    edge = root.edges[0]
    expand(edge, root, model, np.random.default_rng(1))
    logits, _ = model.dynamics(root.state, edge.action)
    assert edge.R == pytest.approx(decode_scalar(logits))


def path_of(rewards):
    path = []
    for r in rewards:
        node = SearchNode(np.zeros(1), STD_NORMAL, 0.0)
        edge = widen(node, np.random.default_rng(0))
        edge.R = r
        path.append((node, edge))
    return path


def test_backup_single_edge():
    path = path_of([0.0])
    backup(path, 0.7, 1.0)
    assert path[0][1].Q == pytest.approx(0.7) and path[0][1].N == 1 and path[0][0].visit_count == 2


def test_backup_discounted_two_edges():
    path = path_of([1.0, 1.0])
    backup(path, 0.0, 0.5)
    assert path[0][1].Q == pytest.approx(1.5) and path[1][1].Q == pytest.approx(1.0)


def test_backup_running_mean():
    path = path_of([0.0])
    backup(path, 2.0, 1.0)
    backup(path, 4.0, 1.0)
    assert path[0][1].Q == pytest.approx(3.0) and path[0][1].N == 2


# -- full search -----------------------------------------------------------------


def test_single_simulation():
    result = run_search(np.zeros(1), bandit_model(), SearchConfig(num_simulations=1, seed=0))
    assert len(result.root.edges) == 1 and result.visit_counts == [1]


def test_zero_simulations_returns_root_value():
    result = run_search(np.zeros(1), bandit_model(), SearchConfig(num_simulations=0, seed=0))
    assert result.visit_counts == [] and result.action is None and result.value == 0.0


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 200), st.integers(0, 10_000), st.floats(0.5, 3.0), st.floats(0.2, 0.8))
def test_widening_invariant_and_budget(sims, seed, c_pw, alpha):
    cfg = SearchConfig(num_simulations=sims, pw_constant=c_pw, pw_exponent=alpha, seed=seed)
    model = bandit_model()

    def observer(node, widened):
        if node is None:
            return
        limit = c_pw * node.visit_count ** alpha
        assert widened == (len(node.edges) < limit)
        assert len(node.edges) <= max(1, math.ceil(limit) + 1)

    result = run_search(np.zeros(1), model, cfg, observer=observer)
    root = result.root
    assert root.visit_count == sims + 1
    assert sum(e.N for e in root.edges) == sims
    assert model.dynamics_calls == sims and model.predict_calls == sims + 1


def test_root_width_bound():
    for sims in (1, 10, 100, 512):
        result = run_search(np.zeros(1), bandit_model(), SearchConfig(num_simulations=sims, seed=sims))
        assert len(result.root.edges) <= math.ceil(math.sqrt(result.root.visit_count)) + 1


def test_bandit_search_finds_optimum():
    errs = []
    for seed in range(5):
        r = run_search(np.zeros(1), bandit_model(), SearchConfig(num_simulations=512, seed=seed))
        mean_action = np.average([a[0] for a in r.actions], weights=r.visit_counts)
        errs.append(abs(mean_action - 0.3))
    assert np.mean(errs) < 0.1


def test_search_value_is_visit_weighted_q():
    r = run_search(np.zeros(1), bandit_model(), SearchConfig(num_simulations=30, seed=1))
    qs = [e.Q for e in r.root.edges if e.N > 0]
    assert r.value == pytest.approx(np.average(qs, weights=r.visit_counts))


# -- targets and action choice ------------------------------------------------------


def result_of(counts):
    return SearchResult([np.array([float(i)]) for i in range(len(counts))], list(counts), 0.0)


def test_density_target_examples():
    assert [p for _, p in visit_density_target(result_of([10, 30]), 1.0)] == pytest.approx([0.25, 0.75])
    assert [p for _, p in visit_density_target(result_of([1, 7, 50]), 1e-12)] == pytest.approx([1 / 3] * 3)
    assert [p for _, p in visit_density_target(result_of([4]), 1.0)] == [1.0]
    with pytest.raises(ValueError):
        visit_density_target(result_of([0, 0]), 1.0)


def test_action_probabilities():
    np.testing.assert_array_equal(action_probabilities([5, 9, 2], 0.0), [0, 1, 0])
    np.testing.assert_allclose(action_probabilities([1, 3], 1.0), [0.25, 0.75])
    np.testing.assert_allclose(action_probabilities([1, 3, 9], math.inf), [1 / 3] * 3)
    np.testing.assert_allclose(action_probabilities([1, 3, 9], 1e6), [1 / 3] * 3, atol=1e-5)


def test_greedy_choice_is_max_visit():
    assert choose_action(result_of([5, 9, 2]), 0.0, np.random.default_rng(0))[0] == 1.0


def test_invalid_search_config():
    for kwargs in ({"num_simulations": -1}, {"pw_exponent": 1.0}, {"pw_constant": 0}, {"discount": 0.0}):
        with pytest.raises(ValueError):
            SearchConfig(**kwargs)
