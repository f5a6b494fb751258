import itertools

import numpy as np
import pytest

from emcom import marl, verify
from emcom.marl import AgentMdp, MarlConfig, MessageMdp
from emcom.probcore import (
    ConfigError,
    ContractError,
    LogDist,
    RandomSource,
    log_normalize,
    logsumexp,
)


def det_agent(seed, s=4, a=2, m=2):
    """Deterministic-dynamics agent plus its next-state lookup table."""
    rng = np.random.default_rng(seed)
    nxt = rng.integers(0, s, size=(s, a, m))
    trans = np.zeros((s, a, m, s))
    for i in range(s):
        for j in range(a):
            for k in range(m):
                trans[i, j, k, nxt[i, j, k]] = 1.0
    step = 0.3 * rng.normal(size=(s, a))
    start = np.zeros(s)
    start[0] = 1.0
    return AgentMdp(trans, step, start), nxt


def stochastic_agent(rng, s=3, a=2, m=2):
    trans = rng.dirichlet(np.ones(s), size=(s, a, m))
    step = 0.2 * rng.normal(size=(s, a))
    start = np.zeros(s)
    start[0] = 1.0
    return AgentMdp(trans, step, start)


def pair_mdp(agent, horizon, prior=None):
    s0, s1 = agent.n_states, agent.n_states
    prior = prior or LogDist.uniform(agent.n_messages)
    return MessageMdp([agent, agent], horizon, np.zeros((s0, s1)), prior)


# ---------------------------------------------------------------------------
# Validation.


def test_agent_mdp_validation():
    good, _ = det_agent(0)
    with pytest.raises(ContractError):
        AgentMdp(good.transitions * 2, good.step_reward, good.start_dist)
    with pytest.raises(ContractError):
        AgentMdp(good.transitions, good.step_reward[:, :1], good.start_dist)
    with pytest.raises(ContractError):
        AgentMdp(good.transitions, good.step_reward, good.start_dist[:-1])


def test_message_mdp_validation():
    a, _ = det_agent(1)
    with pytest.raises(ConfigError):
        MessageMdp([a], 4, np.zeros((4, 4)), LogDist.uniform(2))
    with pytest.raises(ContractError):
        MessageMdp([a, a], 4, np.zeros((4, 4)), LogDist.uniform(3))
    with pytest.raises(ContractError):
        MessageMdp([a, a], 4, np.zeros((4, 5)), LogDist.uniform(2))
    with pytest.raises(ConfigError):
        MessageMdp([a, a], 0, np.zeros((4, 4)), LogDist.uniform(2))
    with pytest.raises(ConfigError):
        MarlConfig(n_episodes=0, n_cycles=1, seed=0)
    with pytest.raises(ConfigError):
        MarlConfig(n_episodes=1, n_cycles=1, seed=0, eta=0.0)


# ---------------------------------------------------------------------------
# Soft value iteration against brute-force enumeration (deterministic
# dynamics, where the expectation and the log-sum-exp backup coincide).


def enum_log_optimality(agent, nxt, messages, terminal, z0, t0=0):
    t_len = len(messages)
    a_n = agent.n_actions
    totals = []
    for seq in itertools.product(range(a_n), repeat=t_len - t0):
        z, tot = z0, 0.0
        for off, a in enumerate(seq):
            tot += agent.step_reward[z, a]
            z = nxt[z, a, messages[t0 + off]]
        totals.append(tot + terminal[z])
    return logsumexp(np.array(totals)) - (t_len - t0) * np.log(a_n)


def test_soft_vi_matches_enumeration():
    for seed in range(6):
        agent, nxt = det_agent(seed + 10)
        rng = np.random.default_rng(seed)
        messages = rng.integers(0, 2, size=4)
        terminal = rng.normal(size=4)
        _, values = marl.soft_value_iteration(agent, messages, terminal)
        for t0 in range(4):
            for z0 in range(4):
                want = enum_log_optimality(agent, nxt, messages, terminal,
                                           z0, t0)
                assert values[t0, z0] == pytest.approx(want, abs=1e-10)


def test_soft_vi_policy_is_first_action_posterior():
    agent, nxt = det_agent(21)
    rng = np.random.default_rng(2)
    messages = rng.integers(0, 2, size=4)
    terminal = rng.normal(size=4)
    log_pol, _ = marl.soft_value_iteration(agent, messages, terminal)
    for z0 in range(4):
        per_action = []
        for a0 in range(2):
            z1 = nxt[z0, a0, messages[0]]
            tail = enum_log_optimality(agent, nxt, messages, terminal, z1, 1)
            per_action.append(agent.step_reward[z0, a0] + tail)
        want = log_normalize(np.array(per_action))
        np.testing.assert_allclose(log_pol[0, z0], want, atol=1e-10)


def test_soft_vi_horizon_one_closed_form():
    agent, nxt = det_agent(33)
    terminal = np.array([0.5, -1.0, 0.2, 0.0])
    log_pol, values = marl.soft_value_iteration(agent, np.array([1]), terminal)
    for z in range(4):
        q = np.array([agent.step_reward[z, a] + terminal[nxt[z, a, 1]]
                      for a in range(2)])
        assert values[0, z] == pytest.approx(logsumexp(q) - np.log(2),
                                             abs=1e-12)
        np.testing.assert_allclose(log_pol[0, z], log_normalize(q),
                                   atol=1e-12)


# ---------------------------------------------------------------------------
# Rollouts.


def test_rollout_bookkeeping():
    agent, nxt = det_agent(40)
    mdp = pair_mdp(agent, 4)
    rng = np.random.default_rng(5)
    messages = rng.integers(0, 2, size=4)
    pols = [marl.soft_value_iteration(a, messages, np.zeros(4))[0]
            for a in mdp.agents]
    roll = marl.plan_and_act(mdp, pols, messages, [0, 0], RandomSource(9))
    assert roll.states.shape == (2, 5) and roll.actions.shape == (2, 4)
    for k in range(2):
        for t in range(4):
            z, a = roll.states[k, t], roll.actions[k, t]
            assert roll.states[k, t + 1] == nxt[z, a, messages[t]]
            assert roll.step_rewards[k, t] == agent.step_reward[z, a]
    assert roll.group_reward == 0.0


def test_rollout_matches_forward_chained_marginal():
    rng = np.random.default_rng(6)
    agent = stochastic_agent(rng)
    mdp = pair_mdp(agent, 3)
    messages = np.array([0, 1, 0])
    terminal = rng.normal(size=3)
    pol = marl.soft_value_iteration(agent, messages, terminal)[0]
    mu = np.array([1.0, 0.0, 0.0])
    for t in range(3):
        step = np.einsum("sa,sar->sr", np.exp(pol[t]),
                         agent.transitions[:, :, messages[t], :])
        mu = mu @ step
    src = RandomSource(77)
    n = 12_000
    freq = np.zeros(3)
    for _ in range(n):
        roll = marl.plan_and_act(mdp, [pol, pol], messages, [0, 0], src)
        freq[roll.states[0, -1]] += 1
    assert 0.5 * np.abs(freq / n - mu).sum() < 0.02


def test_group_reward_terminal_and_cumulative():
    agent, nxt = det_agent(50)
    table = np.zeros((4, 4))
    table[2, 3] = 5.0
    prior = LogDist.uniform(2)
    messages = np.zeros(3, dtype=np.int64)
    pols = [np.zeros((3, 4, 2)) - np.log(2)] * 2
    term_mdp = MessageMdp([agent, agent], 3, table, prior)
    cum_mdp = MessageMdp([agent, agent], 3, table, prior,
                         group_terminal_only=False)
    roll_t = marl.plan_and_act(term_mdp, pols, messages, [0, 0],
                               RandomSource(3))
    want_t = table[roll_t.states[0, -1], roll_t.states[1, -1]]
    assert roll_t.group_reward == want_t
    roll_c = marl.plan_and_act(cum_mdp, pols, messages, [0, 0],
                               RandomSource(3))
    want_c = table[roll_c.states[0, 1:], roll_c.states[1, 1:]].sum()
    assert roll_c.group_reward == want_c


# ---------------------------------------------------------------------------
# Message inference: the per-timestep exchange kernel must target
# prior * p(traj_A step | m) * p(traj_B step | m), with detailed balance.


def test_message_exchange_kernel_battery():
    rng = np.random.default_rng(12)
    for rep in range(6):
        agents = [stochastic_agent(rng, s=3, a=2, m=3) for _ in range(2)]
        prior = LogDist.from_probs(rng.dirichlet(np.full(3, 5.0)))
        mdp = MessageMdp(agents, 4, np.zeros((3, 3)), prior)
        messages = rng.integers(0, 3, size=4)
        pols = [marl.soft_value_iteration(a, messages, np.zeros(3))[0]
                for a in agents]
        roll = marl.plan_and_act(mdp, pols, messages, [0, 0],
                                 RandomSource(100 + rep))
        adapters = [marl.TrajectoryMessageAgent(a, roll.states[k],
                                                roll.actions[k])
                    for k, a in enumerate(agents)]
        for t in range(4):
            sp, li = adapters[t % 2], adapters[1 - t % 2]
            kernel = verify.build_exchange_kernel(sp, li, t, prior)
            target = np.exp(log_normalize(prior.values
                                          + sp.sign_loglik_vector(t)
                                          + li.sign_loglik_vector(t)))
            pi = verify.stationary_distribution(kernel)
            assert 0.5 * np.abs(pi - target).sum() < 1e-10
            assert verify.check_detailed_balance(kernel, target) < 1e-10


def test_message_round_keeps_chain_in_joint_support():
    rng = np.random.default_rng(13)
    agents = [stochastic_agent(rng, s=3, a=2, m=3) for _ in range(2)]
    mdp = MessageMdp(agents, 6, np.zeros((3, 3)), LogDist.uniform(3))
    messages = np.array(rng.integers(0, 3, size=6))
    pols = [marl.soft_value_iteration(a, messages, np.zeros(3))[0]
            for a in agents]
    src = RandomSource(55)
    roll = marl.plan_and_act(mdp, pols, messages, [0, 0], src)
    for _ in range(20):
        marl.message_mh_round(mdp, roll, messages, src)
        for t in range(6):
            for k, a in enumerate(agents):
                p = a.transitions[roll.states[k, t], roll.actions[k, t],
                                  messages[t], roll.states[k, t + 1]]
                assert p > 0.0


def test_rhat_update_is_ema():
    agent, _ = det_agent(60)
    mdp = MessageMdp([agent, agent], 2, np.full((4, 4), 5.0),
                     LogDist.uniform(2))
    cfg = MarlConfig(n_episodes=3, n_cycles=2, seed=7, eta=0.25,
                     optimistic_init=0.5)
    res = marl.run_marl(mdp, cfg)
    # The constant group table makes the per-state optimistic bound 5.0,
    # so every table starts at 2.5 and each visited terminal state moves
    # geometrically toward the realized reward 5.0.
    for k in range(2):
        vals = set(np.round(res.rhat[k], 12))
        allowed = {round(5.0 - 2.5 * 0.75 ** i, 12) for i in range(7)}
        assert vals <= allowed
        assert min(vals) == 2.5


# ---------------------------------------------------------------------------
# run_marl.


def test_run_marl_shapes_and_determinism():
    mdp = marl.meet_at_goal(n_messages=3, horizon=4)
    cfg = MarlConfig(n_episodes=3, n_cycles=2, seed=11)
    a = marl.run_marl(mdp, cfg)
    b = marl.run_marl(mdp, cfg)
    assert a.group_rewards.shape == (3, 2)
    assert a.final_messages.shape == (3, 4)
    assert a.starts.shape == (3, 2)
    np.testing.assert_array_equal(a.group_rewards, b.group_rewards)
    np.testing.assert_array_equal(a.final_messages, b.final_messages)
    np.testing.assert_array_equal(a.starts, b.starts)
    for k in range(2):
        np.testing.assert_array_equal(a.rhat[k], b.rhat[k])


def test_message_blind_dynamics_ignore_vocabulary_size():
    # message_blind strips every message dependence from the transitions,
    # and rollouts draw from substreams disjoint from message inference, so
    # the realized behavior must be bit-identical for any vocabulary size.
    cfg = MarlConfig(n_episodes=4, n_cycles=3, seed=19)
    res1 = marl.run_marl(marl.meet_at_goal(n_messages=1, message_blind=True),
                         cfg)
    res3 = marl.run_marl(marl.meet_at_goal(n_messages=3, message_blind=True),
                         cfg)
    np.testing.assert_array_equal(res1.group_rewards, res3.group_rewards)
    np.testing.assert_array_equal(res1.starts, res3.starts)
    for k in range(2):
        np.testing.assert_array_equal(res1.rhat[k], res3.rhat[k])


# ---------------------------------------------------------------------------
# Meet-at-goal environment.


def test_meet_at_goal_structure():
    mdp = marl.meet_at_goal()
    informed, blind = mdp.agents
    assert informed.n_states == 78 and blind.n_states == 28
    assert informed.n_messages == blind.n_messages == 3
    np.testing.assert_allclose(informed.transitions.sum(axis=3), 1.0,
                               atol=1e-12)
    np.testing.assert_allclose(blind.transitions.sum(axis=3), 1.0,
                               atol=1e-12)
    assert mdp.group_reward.sum() == 24.0
    for g in range(3):
        assert mdp.group_reward[marl.anchored_state(g),
                                marl.met_state(g)] == 8.0
    # informed agent never leaves its goal block (cells plus anchor)
    for g in range(3):
        keep = list(range(g * 25, (g + 1) * 25)) + [marl.anchored_state(g)]
        block = informed.transitions[keep]
        assert block[..., keep].sum() == pytest.approx(block.sum())


def test_meet_at_goal_commit_and_gate_rows():
    mdp = marl.meet_at_goal()
    informed, blind = mdp.agents
    # wall-clipped moves
    assert marl._move(0, 1) == 0 and marl._move(0, 3) == 0
    assert marl._move(12, 1) == 7 and marl._move(12, 4) == 13
    # informed commit on the goal cell: anchors iff the message matches
    for g, cell in enumerate(marl.GOAL_CELLS):
        s = g * 25 + cell
        anc = marl.anchored_state(g)
        for m in range(3):
            row = informed.transitions[s, marl.ACT_COMMIT, m]
            if m == g:
                assert row[anc] == 1.0
            else:
                assert row[anc] == 0.0
                assert row[s] == pytest.approx(0.02)
        # anchored is absorbing under every action and message
        np.testing.assert_allclose(informed.transitions[anc, :, :, anc], 1.0)
        assert informed.step_reward[anc].min() == 3.0
    # commit away from the goal cell is a message-free no-op
    s_off = 0 * 25 + 7
    np.testing.assert_allclose(
        informed.transitions[s_off, marl.ACT_COMMIT, :, s_off], 1.0)
    # blind gate: raised met-entry odds when the message names the corner
    for k, cell in enumerate(marl.GOAL_CELLS):
        met = marl.met_state(k)
        for m in range(3):
            row = blind.transitions[cell, marl.ACT_COMMIT, m]
            want = 0.6 if m == k else 0.2
            assert row[met] == pytest.approx(want)
            assert row[cell] == pytest.approx(1.0 - want)
        np.testing.assert_allclose(blind.transitions[met, :, :, met], 1.0)
        assert blind.step_reward[met].min() == 2.0
        assert blind.step_reward[cell, marl.ACT_COMMIT] == pytest.approx(-0.05)
    np.testing.assert_allclose(
        blind.transitions[7, marl.ACT_COMMIT, :, 7], 1.0)


def test_meet_at_goal_message_cells():
    assert [marl.message_cell(m) for m in range(3)] == [0, 4, 20]
    assert marl.goal_of_state(2 * 25 + 7) == 2
    assert marl.cell_of_state(2 * 25 + 7) == 7
    assert marl.goal_of_state(marl.anchored_state(1)) == 1
    assert marl.cell_of_state(marl.anchored_state(2)) == 20
    with pytest.raises(ConfigError):
        marl.meet_at_goal(anchor_slip=0.0)
    with pytest.raises(ConfigError):
        marl.meet_at_goal(gate_sneak=0.7, gate_hit=0.6)
