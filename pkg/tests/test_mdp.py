import json
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_sessions, oracle_for, random_mdp
from oracles import explicit_mdp, value_iteration
from mdprec.domain import MISSING
from mdprec.mc_model import build, rank
from mdprec.mdp import (
    MdpModel,
    NonConvergenceWarning,
    UnencounteredState,
    estimate_end_probs,
    explore,
    mdp_transition_row,
    myopic_policy,
    observe,
    policy_from_json,
    policy_to_json,
    q_values,
    recommend,
    solve,
)

I = (MISSING,)


# -- transition rows ---------------------------------------------------------


def _one_state_mdp(p, alpha):
    # a single sequence pattern gives an order-1 initial row equal to p
    n = len(p)
    seqs = []
    for i, w in enumerate(p):
        seqs += [[i, i]] * int(round(w * 100))
    model = build(make_sessions(seqs, n), 1)
    return MdpModel(model, rewards=np.ones(n), alpha=alpha)


def test_transition_row_worked_examples():
    m = _one_state_mdp([0.2, 0.3, 0.5, 0.0], alpha=2.0)
    row = mdp_transition_row(m, I, 0)
    np.testing.assert_allclose(row, [0.4, 0.3 * 0.75, 0.5 * 0.75, 0.0])
    # zero-probability recommendation leaves the row as is
    np.testing.assert_allclose(mdp_transition_row(m, I, 3), [0.2, 0.3, 0.5, 0.0])
    m = _one_state_mdp([0.6, 0.4], alpha=2.0)
    np.testing.assert_allclose(mdp_transition_row(m, I, 0), [1.0, 0.0])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(1.0, 5.0))
def test_transition_rows_are_distributions(seed, alpha):
    m = random_mdp(seed, alpha=alpha)
    for s in m.states:
        for a in range(m.n_items):
            row = mdp_transition_row(m, s, a)
            assert math.isclose(row.sum(), 1.0, abs_tol=1e-9)
            assert (row >= 0).all() and (row <= 1).all()


def test_unencountered_row_raises():
    m = random_mdp(0, k=2)
    with pytest.raises(UnencounteredState):
        mdp_transition_row(m, (97, 98), 0)


def test_model_validation():
    model = build(make_sessions([[0, 1]]), 1)
    with pytest.raises(ValueError):
        MdpModel(model, alpha=0.9)
    with pytest.raises(ValueError):
        MdpModel(model, gamma=1.0)
    with pytest.raises(ValueError):
        MdpModel(model, unencountered="guess")
    with pytest.raises(ValueError):
        MdpModel(build(make_sessions([[0, 1]]), 1, unordered=True))


def test_rewards_from_last_slot():
    m = random_mdp(1, k=2)
    for s in m.states:
        expect = 0.0 if s[-1] == MISSING else m.rewards[s[-1]]
        assert m.reward_of(s) == expect


# -- solver against brute force ----------------------------------------------


@pytest.mark.parametrize("seed", range(30))
def test_solve_matches_value_iteration(seed):
    m = random_mdp(seed)
    pol = solve(m, tolerance=1e-12)
    V, actions, _ = oracle_for(m)
    np.testing.assert_allclose(pol.values, V, rtol=0, atol=1e-6)
    np.testing.assert_array_equal(pol.actions, actions)
    assert pol.converged


@pytest.mark.parametrize("seed", range(10))
def test_solve_matches_value_iteration_zero_tail(seed):
    m = random_mdp(seed, k=2, unencountered="zero")
    pol = solve(m, tolerance=1e-12)
    V, actions, _ = oracle_for(m)
    np.testing.assert_allclose(pol.values, V, rtol=0, atol=1e-6)
    np.testing.assert_array_equal(pol.actions, actions)


def test_two_item_two_state_instance():
    # order 1: states (MISSING,) and (0,), (1,); unequal profits
    model = build(make_sessions([[0, 1], [0, 0], [1, 0], [0, 1, 1]], 2), 1)
    m = MdpModel(model, rewards=np.array([1.0, 4.0]), alpha=1.8, gamma=0.9)
    pol = solve(m, tolerance=1e-12)
    V, actions, _ = oracle_for(m)
    np.testing.assert_allclose(pol.values, V, atol=1e-8)
    np.testing.assert_array_equal(pol.actions, actions)


@pytest.mark.parametrize("seed", range(10))
def test_gamma_zero_is_myopic(seed):
    m = random_mdp(seed)
    pol = myopic_policy(m)
    for s in m.states:
        one_step = [mdp_transition_row(m, s, a) @ m.rewards for a in range(m.n_items)]
        best = max(one_step)
        assert pol.value(s) == pytest.approx(best, abs=1e-9)
        assert one_step[pol.action(s)] == pytest.approx(best, abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_alpha_one_makes_actions_inert(seed):
    m = random_mdp(seed, alpha=1.0)
    pol = solve(m, tolerance=1e-12)
    assert (pol.actions == 0).all()
    for s in m.states:
        q = q_values(pol, m, s)
        assert np.ptp(q) <= 1e-9 * max(1.0, abs(q).max())
    # any other tie-break (here a random fixed policy) attains the same values
    rng = np.random.default_rng(seed)
    other = rng.integers(0, m.n_items, size=m.n_states)
    np.testing.assert_allclose(evaluate_fixed(m, other), pol.values, atol=1e-8)


def evaluate_fixed(m, actions):
    from mdprec import kernels
    from mdprec.mdp import _policy_rows

    indptr, prob, nxt, rew = _policy_rows(m, np.asarray(actions, dtype=np.int64))
    rew = rew + m.gamma * np.where(nxt < 0, m.tail_value(rew), 0.0)
    v = np.zeros(m.n_states)
    order = np.arange(m.n_states - 1, -1, -1)
    kernels.evaluate_policy(indptr, prob, nxt, rew, m.gamma, v, order, 1e-13, 10**6)
    return v


def test_uniform_rewards_alpha_one_lowest_item():
    model = build(make_sessions([[2, 1, 0], [1, 2], [0, 2, 1]]), 2)
    m = MdpModel(model, rewards=np.ones(3), alpha=1.0, gamma=0.9)
    pol = solve(m)
    assert (pol.actions == 0).all()


@pytest.mark.parametrize("seed", range(10))
def test_reward_scaling(seed):
    m = random_mdp(seed)
    m2 = MdpModel(m.predictor, rewards=3.5 * m.rewards, alpha=m.alpha, gamma=m.gamma)
    p1, p2 = solve(m, tolerance=1e-12), solve(m2, tolerance=1e-12)
    np.testing.assert_array_equal(p1.actions, p2.actions)
    np.testing.assert_allclose(p2.values, 3.5 * p1.values, rtol=1e-9, atol=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_policy_iteration_is_monotone(seed):
    m = random_mdp(seed, n_items=4, k=2, gamma=0.9)
    pol = solve(m, tolerance=1e-12, trace=True)
    for before, after in zip(pol.value_trace, pol.value_trace[1:]):
        assert (after >= before - 1e-9).all()


@pytest.mark.parametrize("seed", range(10))
def test_greedy_consistency(seed):
    m = random_mdp(seed)
    pol = solve(m, tolerance=1e-12)
    for s in m.states:
        q = q_values(pol, m, s)
        assert q[pol.action(s)] >= q.max() - 1e-9
        assert pol.value(s) == pytest.approx(q.max(), abs=1e-6)


def test_nonconvergence_warns():
    m = random_mdp(3, n_items=4, k=2, gamma=0.9)
    if solve(m).rounds < 2:
        pytest.skip("instance converges in one round")
    with pytest.warns(NonConvergenceWarning):
        pol = solve(m, max_iterations=1)
    assert not pol.converged


def test_solve_argument_checks():
    m = random_mdp(0)
    with pytest.raises(ValueError):
        solve(m, tolerance=0)


# -- serving ------------------------------------------------------------------


def test_recommend_head_and_fallback():
    m = random_mdp(5, n_items=4, k=2)
    pol = solve(m)
    for s in m.states:
        top = recommend(pol, m, s, 1)
        assert top == [pol.action(s)]
        full = recommend(pol, m, s, 10)
        assert sorted(full) == list(range(m.n_items))
        q = q_values(pol, m, s)
        assert all(q[a] >= q[b] - 1e-9 for a, b in zip(full[1:], full[2:]))
    unseen = (3, 3) if (3, 3) not in m.index else (2, 2)
    if unseen not in m.index:
        assert recommend(pol, m, unseen, 3) == rank(m.predictor, list(unseen))[:3]
    with pytest.raises(ValueError):
        recommend(pol, m, m.states[0], 0)


def _two_action_policy(q_hi=1.0, q_lo=0.9):
    # state (MISSING,) with two items; rewards tuned so Q differs by 0.1 at gamma 0
    model = build(make_sessions([[0, 0], [1, 1]]), 1)
    m = MdpModel(model, rewards=np.array([1.0, 1.0]), alpha=1.0, gamma=0.0)
    pol = solve(m)
    qs = {0: q_hi, 1: q_lo}

    def fake_q(policy, mm, s):
        return np.array([qs[0], qs[1]])

    return m, pol, fake_q


def test_explore_epsilon_zero_is_greedy():
    m = random_mdp(2)
    pol = solve(m)
    for s in m.states:
        assert all(explore(pol, m, s, 0.0, 1.0, seed) == pol.action(s) for seed in range(5))


def test_explore_boltzmann_frequencies(monkeypatch):
    import mdprec.mdp as mdp_mod

    m, pol, fake_q = _two_action_policy()
    monkeypatch.setattr(mdp_mod, "q_values", fake_q)
    rng = np.random.default_rng(2024)
    n = 10_000
    hits = sum(explore(pol, m, I, 0.2, 0.1, rng) == 0 for _ in range(n))
    p = math.exp(10) / (math.exp(10) + math.exp(9))
    assert abs(hits - n * p) <= 3 * math.sqrt(n * p * (1 - p))
    # deterministic per seed
    assert [explore(pol, m, I, 0.2, 0.1, 7) for _ in range(3)] == [explore(pol, m, I, 0.2, 0.1, 7)] * 3


def test_explore_wide_and_hot_is_uniform(monkeypatch):
    import mdprec.mdp as mdp_mod

    m, pol, fake_q = _two_action_policy()
    monkeypatch.setattr(mdp_mod, "q_values", fake_q)
    rng = np.random.default_rng(0)
    n = 10_000
    hits = sum(explore(pol, m, I, math.inf, 1e9, rng) == 0 for _ in range(n))
    assert abs(hits - n / 2) <= 3 * math.sqrt(n / 4)


# -- online updates ------------------------------------------------------------


def test_observe_single_blend():
    m = random_mdp(4)
    s = m.states[0]
    init = mdp_transition_row(m, s, 1)
    observe(m, s, 1, 0)
    expect = (m.prior_strength * init + np.eye(m.n_items)[0]) / (m.prior_strength + 1)
    np.testing.assert_allclose(mdp_transition_row(m, s, 1), expect)
    # other actions are untouched
    m2 = random_mdp(4)
    np.testing.assert_array_equal(mdp_transition_row(m, s, 0), mdp_transition_row(m2, s, 0))


def test_observe_without_prior_is_empirical():
    m = random_mdp(4)
    m.prior_strength = 0.0
    s = m.states[0]
    for x in (0, 0, 1, 0):
        observe(m, s, 1, x)
    row = mdp_transition_row(m, s, 1)
    assert row[0] == 0.75 and row[1] == 0.25


def test_observe_converges_to_truth():
    m = random_mdp(6, n_items=4)
    s = m.states[0]
    truth = np.array([0.1, 0.6, 0.2, 0.1])
    rng = np.random.default_rng(0)
    for x in rng.choice(4, size=10_000, p=truth):
        observe(m, s, 2, int(x))
    assert np.abs(mdp_transition_row(m, s, 2) - truth).max() < 0.02


def test_observe_new_state_creates_row():
    m = random_mdp(7, k=2)
    s = (11, 12)
    observe(m, s, 0, 1)
    np.testing.assert_allclose(mdp_transition_row(m, s, 0), np.eye(m.n_items)[1])
    with pytest.raises(ValueError):
        observe(m, s, 0, 99)


def test_resolve_after_observe_matches_oracle():
    m = random_mdp(8, n_items=3, k=1, gamma=0.8)
    s = m.states[0]
    rng = np.random.default_rng(1)
    for x in rng.choice(3, size=50):
        observe(m, s, 1, int(x))
    pol = solve(m, tolerance=1e-12)
    base = {t: m.base_row(t) for t in m.states}
    T = explicit_mdp(m.states, base, m.alpha)
    T[m.index[s], 1] = mdp_transition_row(m, s, 1)
    V, actions, _ = value_iteration(m.states, T, m.rewards, m.gamma)
    np.testing.assert_allclose(pol.values, V, atol=1e-6)
    np.testing.assert_array_equal(pol.actions, actions)


# -- end state and persistence ------------------------------------------------


def test_end_probs_and_end_row():
    ss = make_sessions([[0, 1], [0, 1, 1], [1, 0]])
    ends = estimate_end_probs(ss, 1)
    assert ends[(1,)] == pytest.approx(2 / 4)
    assert ends[(0,)] == pytest.approx(1 / 3)
    model = build(ss, 1)
    m = MdpModel(model, end_probs=ends, alpha=1.5)
    for s in m.states:
        for a in range(2):
            row = mdp_transition_row(m, s, a)
            assert row.shape == (3,) and math.isclose(row.sum(), 1.0)
    pol = solve(m, tolerance=1e-12)
    assert np.isfinite(pol.values).all()


def test_policy_json_round_trip():
    m = random_mdp(9, k=2)
    pol = solve(m)
    doc = json.loads(json.dumps(policy_to_json(pol, m, top_m=3, timestamp=False)))
    pol2, m2 = policy_from_json(doc, m.predictor)
    np.testing.assert_array_equal(pol2.actions, pol.actions)
    np.testing.assert_array_equal(pol2.values, pol.values)
    assert m2.alpha == m.alpha and m2.unencountered == m.unencountered
    assert policy_to_json(pol2, m2, top_m=3, timestamp=False) == doc
    assert all(len(row["top"]) == 3 for row in doc["states"])
