"""Message-conditioned two-agent control on tabular MDPs.

Each agent owns a small MDP whose transition law depends on a shared
per-step message sequence.  Planning is soft value iteration under a
uniform action prior, execution samples the softmax policies, and the group
reward observed at the end of a rollout feeds a per-agent EMA approximation
that becomes the terminal bonus of the next plan.  Between rollouts the
message sequence is resampled by the same propose/accept exchange as the
naming game, with timesteps in place of objects and trajectory transition
likelihoods in place of category likelihoods; roles alternate with timestep
parity.

The optimality weight exp(rhat) a speaker could attach to its message
posterior is constant in the message and cancels on normalization, so the
proposal is prior times transition likelihood only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import naming_game as ng
from .probcore import (
    ConfigError,
    ContractError,
    LogDist,
    RandomSource,
    log_normalize,
    sample_categorical,
)

# Substream key roots: episode starts, rollouts, message init, message MH.
_S_START, _S_ROLLOUT, _S_MSG_INIT, _S_MSG = 0, 1, 2, 3

_ROW_TOL = 1e-9


class AgentMdp:
    """One agent's tabular MDP with message-indexed transitions.

    transitions has shape (S, A, M, S) and is row-stochastic over the last
    axis; step_reward is (S, A); start_dist is a distribution over S.
    """

    def __init__(self, transitions: np.ndarray, step_reward: np.ndarray,
                 start_dist: np.ndarray):
        self.transitions = np.asarray(transitions, dtype=float)
        self.step_reward = np.asarray(step_reward, dtype=float)
        self.start_dist = np.asarray(start_dist, dtype=float)
        if self.transitions.ndim != 4:
            raise ContractError("transitions must be (S, A, M, S)")
        s, a, _, s2 = self.transitions.shape
        if s != s2:
            raise ContractError("transition source and target sizes differ")
        if self.step_reward.shape != (s, a):
            raise ContractError("step_reward must be (S, A)")
        if self.start_dist.shape != (s,):
            raise ContractError("start_dist must be (S,)")
        if np.abs(self.transitions.sum(axis=3) - 1.0).max() > _ROW_TOL:
            raise ContractError("transition rows must sum to one")
        if abs(self.start_dist.sum() - 1.0) > _ROW_TOL or self.start_dist.min() < 0:
            raise ContractError("start_dist must be a distribution")
        with np.errstate(divide="ignore"):
            self.log_transitions = np.log(self.transitions)
            self.log_start = log_normalize(np.log(self.start_dist))

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_messages(self) -> int:
        return self.transitions.shape[2]


class MessageMdp:
    """Two coupled AgentMdps, a horizon, and a group reward table."""

    def __init__(self, agents: list, horizon: int, group_reward: np.ndarray,
                 message_prior: LogDist, group_terminal_only: bool = True):
        if len(agents) != 2:
            raise ConfigError("exactly two agents are supported")
        self.agents = list(agents)
        self.horizon = int(horizon)
        self.group_reward = np.asarray(group_reward, dtype=float)
        self.message_prior = message_prior
        self.group_terminal_only = bool(group_terminal_only)
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        sizes = {a.n_messages for a in self.agents}
        if sizes != {len(message_prior)}:
            raise ContractError("message spaces of agents and prior disagree")
        want = (self.agents[0].n_states, self.agents[1].n_states)
        if self.group_reward.shape != want:
            raise ContractError("group_reward must be (S_0, S_1)")

    @property
    def n_messages(self) -> int:
        return len(self.message_prior)


def soft_value_iteration(agent: AgentMdp, messages: np.ndarray,
                         terminal_reward: np.ndarray):
    """Backward soft Bellman recursion under a uniform action prior.

    Q_t(z,a) = r(z,a) + E_{p(z'|z,a,m_t)}[V_{t+1}(z')],
    V_t(z) = logsumexp_a Q_t(z,a) - log A, boundary V_T = terminal_reward.
    Returns (log_policies (T,S,A), values (T+1,S)).  With deterministic
    transitions exp(V_0) is exactly the uniform-policy expectation of
    exp(total reward); with stochastic ones the expectation sits inside
    the exponential, which is the standard risk-neutral soft backup.
    """
    messages = np.asarray(messages, dtype=np.int64)
    t_len = messages.shape[0]
    values = np.empty((t_len + 1, agent.n_states))
    values[t_len] = np.asarray(terminal_reward, dtype=float)
    log_policies = np.empty((t_len, agent.n_states, agent.n_actions))
    log_a = np.log(agent.n_actions)
    for t in range(t_len - 1, -1, -1):
        trans = agent.transitions[:, :, messages[t], :]
        q = agent.step_reward + trans @ values[t + 1]
        qmax = q.max(axis=1)
        lse = qmax + np.log(np.exp(q - qmax[:, None]).sum(axis=1))
        values[t] = lse - log_a
        log_policies[t] = q - lse[:, None]
    return log_policies, values


@dataclass
class Rollout:
    states: np.ndarray        # (K, T+1)
    actions: np.ndarray       # (K, T)
    step_rewards: np.ndarray  # (K, T)
    group_reward: float


def plan_and_act(mdp: MessageMdp, log_policies: list, messages: np.ndarray,
                 starts, rng: RandomSource) -> Rollout:
    """Sample both agents' trajectories under fixed policies and messages."""
    messages = np.asarray(messages, dtype=np.int64)
    t_len = messages.shape[0]
    k_n = len(mdp.agents)
    states = np.empty((k_n, t_len + 1), dtype=np.int64)
    actions = np.empty((k_n, t_len), dtype=np.int64)
    step_rewards = np.empty((k_n, t_len))
    for k, agent in enumerate(mdp.agents):
        z = int(starts[k])
        states[k, 0] = z
        for t in range(t_len):
            a = sample_categorical(LogDist(log_policies[k][t, z]), rng)
            step_rewards[k, t] = agent.step_reward[z, a]
            nxt = sample_categorical(
                LogDist(agent.log_transitions[z, a, messages[t]]), rng)
            actions[k, t] = a
            states[k, t + 1] = nxt
            z = nxt
    if mdp.group_terminal_only:
        group = float(mdp.group_reward[states[0, -1], states[1, -1]])
    else:
        group = float(mdp.group_reward[states[0, 1:], states[1, 1:]].sum())
    return Rollout(states, actions, step_rewards, group)


class TrajectoryMessageAgent:
    """Adapter presenting a rollout to the naming-game exchange helpers.

    The "object" index is the timestep; the likelihood factor for message m
    is the probability of the realized transition at that step under m.
    """

    frozen = True

    def __init__(self, agent: AgentMdp, states: np.ndarray,
                 actions: np.ndarray):
        self.log_transitions = agent.log_transitions
        self.states = np.asarray(states, dtype=np.int64)
        self.actions = np.asarray(actions, dtype=np.int64)

    def sign_loglik_vector(self, t: int) -> np.ndarray:
        return self.log_transitions[self.states[t], self.actions[t], :,
                                    self.states[t + 1]]


def message_mh_round(mdp: MessageMdp, rollout: Rollout, messages: np.ndarray,
                     rng: RandomSource) -> float:
    """One propose/accept pass over every timestep; returns accept rate.

    Speaker at timestep t is agent t % 2.  The chain state always has
    positive probability under both trajectories: proposals are drawn from
    the speaker's support and acceptance vetoes listener-impossible moves.
    """
    adapters = [TrajectoryMessageAgent(a, rollout.states[k], rollout.actions[k])
                for k, a in enumerate(mdp.agents)]
    accepted = 0
    for t in range(messages.shape[0]):
        sp = adapters[t % 2]
        li = adapters[1 - t % 2]
        proposed = ng.propose_sign(sp, t, mdp.message_prior, rng)
        gamma = ng.acceptance_probability(li, t, proposed, int(messages[t]))
        if rng.uniform() < gamma:
            messages[t] = proposed
            accepted += 1
    return accepted / messages.shape[0]


@dataclass
class MarlConfig:
    n_episodes: int
    n_cycles: int
    seed: int
    eta: float = 0.1
    optimistic_init: float = 0.0

    def __post_init__(self):
        if self.n_episodes < 1 or self.n_cycles < 1:
            raise ConfigError("episode and cycle counts must be >= 1")
        if not 0.0 < self.eta <= 1.0:
            raise ConfigError("eta must lie in (0, 1]")


@dataclass
class MarlResult:
    config: MarlConfig
    group_rewards: np.ndarray   # (episodes, cycles) realized group reward
    accept_rates: np.ndarray    # (episodes, cycles) message MH accept rate
    starts: np.ndarray          # (episodes, K)
    final_messages: np.ndarray  # (episodes, T) after the last exchange pass
    rhat: list                  # per-agent learned terminal bonus tables


def run_marl(mdp: MessageMdp, config: MarlConfig) -> MarlResult:
    """Alternate planning, acting, reward approximation and message MH.

    Per episode: starts and messages are redrawn, then each cycle plans
    both agents against the current messages and rhat tables, rolls out,
    EMA-updates rhat at the visited terminal states toward the realized
    group reward, and runs one message exchange pass.  Rollouts and message
    inference draw from separate substreams, so message-blind dynamics
    yield identical rollouts regardless of the message space.

    Each rhat table starts at optimistic_init times the per-state bound
    max over the other agent's states of the group reward.  Zero (the
    default) avoids chasing potentially unreachable paying states; private
    step rewards must then carry the early exploration.
    """
    root = RandomSource(config.seed)
    k_n = len(mdp.agents)
    t_len = mdp.horizon
    rhat = [config.optimistic_init * mdp.group_reward.max(axis=1),
            config.optimistic_init * mdp.group_reward.max(axis=0)]
    group = np.empty((config.n_episodes, config.n_cycles))
    acc = np.empty((config.n_episodes, config.n_cycles))
    starts_rec = np.empty((config.n_episodes, k_n), dtype=np.int64)
    msgs_rec = np.empty((config.n_episodes, t_len), dtype=np.int64)
    for ep in range(config.n_episodes):
        rng_start = root.substream(_S_START, ep)
        starts = [sample_categorical(LogDist(a.log_start), rng_start)
                  for a in mdp.agents]
        rng_minit = root.substream(_S_MSG_INIT, ep)
        messages = np.array([sample_categorical(mdp.message_prior, rng_minit)
                             for _ in range(t_len)], dtype=np.int64)
        for cy in range(config.n_cycles):
            policies = [soft_value_iteration(a, messages, rhat[k])[0]
                        for k, a in enumerate(mdp.agents)]
            roll = plan_and_act(mdp, policies, messages, starts,
                                root.substream(_S_ROLLOUT, ep, cy))
            for k in range(k_n):
                term = roll.states[k, -1]
                rhat[k][term] += config.eta * (roll.group_reward - rhat[k][term])
            acc[ep, cy] = message_mh_round(mdp, roll, messages,
                                           root.substream(_S_MSG, ep, cy))
            group[ep, cy] = roll.group_reward
        starts_rec[ep] = starts
        msgs_rec[ep] = messages
    return MarlResult(config, group, acc, starts_rec, msgs_rec, rhat)


# ---------------------------------------------------------------------------
# Meet-at-goal benchmark: a 5x5 grid with three corner rendezvous points.
# One agent privately observes which corner pays this episode (it is encoded
# in its state); the other can learn it only through the message sequence.
#
# Any outcome realized under a message was drawn from that message's own
# transition law, so its likelihood can only favor the message that was
# current, never the truth; dynamics that drag agents around under every
# message therefore make message inference self-confirming and carry no
# information in equilibrium.  The benchmark avoids this by keeping all
# movement deterministic and message-free and concentrating the message
# dependence in actions a planner only takes when the current message
# already agrees with what it knows.  The informed agent commits on its
# goal corner: under a matching message the commit enters an absorbing
# anchored state that pays a private bonus per step, while under a wrong
# message it earns nothing and scatters, so the plan commits exactly when
# the message is right.  The entry transition is impossible under any
# other message, so the exchange kernel freezes the entry step's message;
# once anchored the dynamics are message-free and emit nothing, so wrong
# messages at other steps are never reinforced and keep churning until
# they too can host an entry.  The blind agent's commit on a corner
# enters an absorbing met state with raised probability when the message
# names that corner; met states pay a private stream, which makes its
# plan chase whichever corner the locked messages vote for.


GRID = 5
N_CELLS = GRID * GRID
GOAL_CELLS = (0, 4, 20)
START_CELL = 12
N_GOALS = len(GOAL_CELLS)
# Actions: stay, up, down, left, right, commit.
N_MOVES = 5
ACT_COMMIT = 5
N_ACTIONS = 6
_DELTAS = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))


def _move(cell: int, action: int) -> int:
    r, c = divmod(cell, GRID)
    dr, dc = _DELTAS[action]
    r2, c2 = r + dr, c + dc
    if not (0 <= r2 < GRID and 0 <= c2 < GRID):
        return cell
    return r2 * GRID + c2


def message_cell(m: int) -> int:
    return GOAL_CELLS[m % N_GOALS]


def goal_of_state(s: int) -> int:
    """Goal index encoded in the informed agent's state."""
    if s >= N_GOALS * N_CELLS:
        return s - N_GOALS * N_CELLS
    return s // N_CELLS


def cell_of_state(s: int) -> int:
    if s >= N_GOALS * N_CELLS:
        return GOAL_CELLS[s - N_GOALS * N_CELLS]
    return s % N_CELLS


def anchored_state(g: int) -> int:
    """Informed-agent state while holding a confirmed commit on goal g."""
    return N_GOALS * N_CELLS + g


def met_state(k: int) -> int:
    """Blind-agent absorbing state for a completed meet at corner k."""
    return N_CELLS + k


def meet_at_goal(n_messages: int = 3, horizon: int = 10,
                 step_cost: float = -0.01, anchor_bonus: float = 3.0,
                 anchor_slip: float = 0.02, gate_cost: float = -0.05,
                 met_bonus: float = 2.0, gate_hit: float = 0.6,
                 gate_sneak: float = 0.2, meet_reward: float = 8.0,
                 message_blind: bool = False) -> MessageMdp:
    """Two-agent rendezvous whose group reward pays iff the informed agent
    holds an anchored commit on its goal corner and the blind agent has
    entered the matching met state by the final step.

    A commit on the goal cell under a matching message enters the
    absorbing anchored state, which pays anchor_bonus per step; under a
    wrong message the commit earns nothing and scatters across the grid
    with probability 1 - anchor_slip, so the informed planner commits
    exactly when the message is right and the entry step freezes that
    message in the exchange (no other message could have produced it),
    while the message-free anchored dynamics leave every other step free
    to keep churning.  The blind agent's commit on a corner
    enters the met state with probability gate_hit when the message names
    that corner and gate_sneak when it does not; gate_sneak > 0 keeps the
    met-entry likelihood ratio finite so one early absorption at a wrong
    corner cannot permanently veto the goal message at that step, and the
    moderate hit/sneak contrast keeps failed attempts from swamping the
    exchange with evidence against the named corner.  Met states pay
    met_bonus per remaining step, so the planner wants gates open early
    and chases the corner the message sequence names most often; each
    attempt costs gate_cost so commits are worth spamming only where
    gates are likely to open.  Rewards are in log-likelihood units of the
    optimality variable, so meet_reward doubles as planner sharpness.
    message_blind=True strips every message dependence (commits always
    anchor, gates always open at gate_hit) for vacuity checks.
    """
    if not 0.0 < anchor_slip <= 1.0:
        raise ConfigError("anchor_slip must lie in (0, 1]")
    if not (0.0 < gate_sneak <= gate_hit <= 1.0):
        raise ConfigError("need 0 < gate_sneak <= gate_hit <= 1")
    n_a = N_GOALS * N_CELLS + N_GOALS
    trans_a = np.zeros((n_a, N_ACTIONS, n_messages, n_a))
    for g in range(N_GOALS):
        base = g * N_CELLS
        gc = GOAL_CELLS[g]
        anc = anchored_state(g)
        for c in range(N_CELLS):
            s = base + c
            for a in range(N_MOVES):
                trans_a[s, a, :, base + _move(c, a)] = 1.0
            if c != gc:
                trans_a[s, ACT_COMMIT, :, s] = 1.0
                continue
            for m in range(n_messages):
                if message_blind or message_cell(m) == gc:
                    trans_a[s, ACT_COMMIT, m, anc] = 1.0
                else:
                    trans_a[s, ACT_COMMIT, m, s] = anchor_slip
                    spread = (1.0 - anchor_slip) / (N_CELLS - 1)
                    for c2 in range(N_CELLS):
                        if c2 != gc:
                            trans_a[s, ACT_COMMIT, m, base + c2] = spread
        trans_a[anc, :, :, anc] = 1.0
    cost_a = np.zeros((n_a, N_ACTIONS))
    cost_a[:N_GOALS * N_CELLS, 1:N_MOVES] = step_cost
    for g in range(N_GOALS):
        cost_a[anchored_state(g), :] = anchor_bonus
    start_a = np.zeros(n_a)
    start_a[[g * N_CELLS + START_CELL for g in range(N_GOALS)]] = 1.0 / N_GOALS
    informed = AgentMdp(trans_a, cost_a, start_a)

    n_b = N_CELLS + N_GOALS
    trans_b = np.zeros((n_b, N_ACTIONS, n_messages, n_b))
    for c in range(N_CELLS):
        for a in range(N_MOVES):
            trans_b[c, a, :, _move(c, a)] = 1.0
        if c in GOAL_CELLS:
            k = GOAL_CELLS.index(c)
            for m in range(n_messages):
                hit = gate_hit if (message_blind or message_cell(m) == c) \
                    else gate_sneak
                trans_b[c, ACT_COMMIT, m, met_state(k)] = hit
                trans_b[c, ACT_COMMIT, m, c] = 1.0 - hit
        else:
            trans_b[c, ACT_COMMIT, :, c] = 1.0
    for k in range(N_GOALS):
        trans_b[met_state(k), :, :, met_state(k)] = 1.0
    cost_b = np.zeros((n_b, N_ACTIONS))
    cost_b[:N_CELLS, 1:N_MOVES] = step_cost
    for k, c in enumerate(GOAL_CELLS):
        cost_b[c, ACT_COMMIT] = gate_cost
        cost_b[met_state(k), :] = met_bonus
    start_b = np.zeros(n_b)
    start_b[START_CELL] = 1.0
    blind = AgentMdp(trans_b, cost_b, start_b)

    group = np.zeros((n_a, n_b))
    for g in range(N_GOALS):
        group[anchored_state(g), met_state(g)] = meet_reward
    prior = LogDist.uniform(n_messages)
    return MessageMdp([informed, blind], horizon, group, prior)
