import numpy as np
import pytest
from hypothesis import given, settings

from tests.strategies import advance_probabilities, chain_sizes, discounts, tabular_mdps
from tools.env import (
    StateEmbedding,
    TabularMdp,
    TabularPolicy,
    bellman_residual,
    bootstrap_operator,
    chain_q_closed_form,
    epsilon_greedy_policy,
    exact_q,
    load_mdp,
    make_chain_mdp,
    perturb_discrete_actions,
    policy_value_exact,
    pooled_state_distribution,
    save_mdp,
    single_action_policy,
    uniform_policy,
    value_iteration,
)
from tools.errors import MdpError


def test_chain_layout():
    mdp = make_chain_mdp(100, 0.5, 0.99)
    assert mdp.n_states == 100 and mdp.n_actions == 1
    assert mdp.terminal[-1] and not mdp.terminal[:-1].any()
    assert mdp.initial_dist[0] == 1.0
    np.testing.assert_allclose(mdp.transition.sum(axis=2), 1.0, atol=1e-12)
    assert mdp.embedding.positions[0] == -2.0
    assert mdp.embedding.positions[50] == pytest.approx(0.0)
    # reward peaks at the middle of the chain
    assert mdp.reward[50, 0] == pytest.approx(1.0)
    assert mdp.reward[-1, 0] == 0.0


def test_embedding_spacing():
    emb = StateEmbedding(100)
    np.testing.assert_allclose(np.diff(emb.positions), 0.04)


@pytest.mark.parametrize("p", [0.0, -0.1, 1.5])
def test_chain_rejects_bad_advance_probability(p):
    with pytest.raises(MdpError):
        make_chain_mdp(10, p)


def test_mdp_rejects_bad_rows():
    transition = np.array([[[0.5, 0.4]], [[0.0, 1.0]]])
    with pytest.raises(MdpError, match="sum to 1"):
        TabularMdp(2, 1, transition, np.zeros((2, 1)), np.array([1.0, 0.0]), np.array([False, True]), 0.9)


def test_mdp_rejects_rewarding_terminal():
    transition = np.array([[[0.0, 1.0]], [[0.0, 1.0]]])
    with pytest.raises(MdpError, match="terminal"):
        TabularMdp(2, 1, transition, np.ones((2, 1)), np.array([1.0, 0.0]), np.array([False, True]), 0.9)


def test_policy_rows_must_be_distributions():
    with pytest.raises(MdpError):
        TabularPolicy(np.array([[0.7, 0.7]]))


def test_policy_sampling_frequencies(rng):
    policy = TabularPolicy(np.array([[0.2, 0.8]]))
    actions = policy.sample(np.zeros((20000, 1)), rng)
    assert abs(actions.mean() - 0.8) < 0.02


def test_epsilon_greedy_puts_mass_on_argmax():
    policy = epsilon_greedy_policy(np.array([[0.0, 1.0, 0.5]]), epsilon=0.3)
    np.testing.assert_allclose(policy.probs[0], [0.1, 0.8, 0.1])


@given(n=chain_sizes, p=advance_probabilities, gamma=discounts)
@settings(max_examples=40, deadline=None)
def test_closed_form_matches_value_iteration(n, p, gamma):
    mdp = make_chain_mdp(n, p, gamma)
    policy = single_action_policy(mdp)
    np.testing.assert_allclose(exact_q(mdp, policy), chain_q_closed_form(mdp), atol=1e-9)


@given(mdp=tabular_mdps())
@settings(max_examples=30, deadline=None)
def test_exact_q_is_a_bellman_fixed_point(mdp):
    policy = uniform_policy(mdp.n_states, mdp.n_actions)
    q = exact_q(mdp, policy)
    assert bellman_residual(mdp, policy, q) <= 1e-9
    assert np.all(q[mdp.terminal] == 0.0)


def test_zero_discount_gives_immediate_reward():
    mdp = make_chain_mdp(10, 0.5, 0.0)
    q = exact_q(mdp, single_action_policy(mdp))
    np.testing.assert_allclose(q[:-1, 0], mdp.reward[:-1, 0])


def test_deterministic_chain_is_discounted_reward_sum():
    mdp = make_chain_mdp(8, 1.0, 0.9)
    q = exact_q(mdp, single_action_policy(mdp))
    expected = sum(0.9 ** t * mdp.reward[t, 0] for t in range(7))
    assert q[0, 0] == pytest.approx(expected, abs=1e-12)


def test_value_iteration_names_the_cap():
    mdp = make_chain_mdp(30, 0.1, 0.99)
    with pytest.raises(MdpError, match="cap of 3 iterations"):
        value_iteration(mdp, single_action_policy(mdp), max_iters=3)


def test_policy_value_reads_initial_state():
    mdp = make_chain_mdp(20, 0.5, 0.9)
    policy = single_action_policy(mdp)
    q = exact_q(mdp, policy)
    assert policy_value_exact(mdp, policy) == pytest.approx(q[0, 0])


def test_bootstrap_operator_zeroes_terminals(chain, chain_policy):
    op = bootstrap_operator(chain, chain_policy)
    assert np.all(op[-1] == 0.0)
    assert np.all(op[:, -1] == 0.0)
    np.testing.assert_allclose(op[:-2].sum(axis=1), 1.0)


def test_perturbation_mixes_actions():
    transition = np.zeros((3, 2, 3))
    transition[0, 0, 1] = 1.0
    transition[0, 1, 2] = 1.0
    transition[1, :, 2] = 1.0
    transition[2, :, 2] = 1.0
    mdp = TabularMdp(3, 2, transition, np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]]),
                     np.array([1.0, 0.0, 0.0]), np.array([False, False, True]), 0.9)
    noisy = perturb_discrete_actions(mdp, 0.5)
    np.testing.assert_allclose(noisy.transition[0, 0], [0.0, 0.75, 0.25])
    np.testing.assert_allclose(noisy.reward[0], [0.75, 0.25])
    assert perturb_discrete_actions(mdp, 0.0).transition[0, 0, 1] == 1.0
    with pytest.raises(MdpError):
        perturb_discrete_actions(mdp, 1.5)


def test_pooled_distribution_is_uniform_on_live_chain_states():
    mdp = make_chain_mdp(50, 0.3, 0.99)
    dist = pooled_state_distribution(mdp, single_action_policy(mdp))
    np.testing.assert_allclose(dist[:-1], 1.0 / 49, atol=1e-12)
    assert dist[-1] == 0.0


def test_pooled_distribution_needs_a_live_start():
    mdp = make_chain_mdp(5, 0.5, 0.9)
    start_at_terminal = np.zeros(5)
    start_at_terminal[-1] = 1.0
    stuck = TabularMdp(5, 1, mdp.transition, mdp.reward, start_at_terminal, mdp.terminal, 0.9)
    with pytest.raises(MdpError, match="no live state"):
        pooled_state_distribution(stuck, single_action_policy(stuck))


def test_mdp_file_round_trip(tmp_path, chain):
    path = tmp_path / "chain.json"
    save_mdp(chain, str(path))
    loaded = load_mdp(str(path))
    np.testing.assert_array_equal(loaded.transition, chain.transition)
    np.testing.assert_array_equal(loaded.reward, chain.reward)
    np.testing.assert_array_equal(loaded.terminal, chain.terminal)
    assert loaded.discount == chain.discount
    assert loaded.embedding == chain.embedding


def test_mdp_file_missing_field(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{"n_states": 2}', encoding="utf-8")
    with pytest.raises(MdpError, match="missing field"):
        load_mdp(str(path))
