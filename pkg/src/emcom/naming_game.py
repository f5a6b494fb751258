"""Decentralized naming game with Metropolis-Hastings sign exchange.

One exchange: speaker and listener each re-infer their category for the
object, the speaker proposes a sign from its own sign posterior, and the
listener accepts with probability min(1, ratio of its category likelihood
under proposed vs current sign).  Acceptance replaces the listener's sign.
Roles rotate so that a round covers every ordered pair once.

The proposal and acceptance helpers below are the single implementation used
by both the simulator and the exact kernel assembly in verify; fault
injection in the test-suite swaps these module functions.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import pgm
from .probcore import (
    ConfigError,
    ContractError,
    LogDist,
    PropertyViolation,
    RandomSource,
    log_normalize,
    sample_categorical,
)

PAIRINGS = ("fixed-pair", "round-robin", "random-partner")
LEARNINGS = ("gibbs", "map", "frozen")
ABLATIONS = ("none", "always-reject")
RECORDS = ("full", "rounds", "none")

# Substream key roots: initialization, play, pairing draws.
_S_INIT, _S_PLAY, _S_PAIR = 0, 1, 2
TRACE_SCHEMA_VERSION = 1


@dataclass
class GameConfig:
    n_agents: int
    n_objects: int
    vocab_size: int
    n_categories: int
    n_features: int
    n_rounds: int
    seed: int
    alpha_phi: float = pgm.DEFAULT_ALPHA_PHI
    alpha_theta: float = pgm.DEFAULT_ALPHA_THETA
    pairing: str = "round-robin"
    learning: str = "gibbs"
    batched: bool = False
    ablation: str = "none"
    burn_in: int = 0
    record: str = "full"
    sign_order: tuple | None = None  # vocabulary walk order, equivariance hook

    def __post_init__(self):
        if min(self.n_agents, self.n_objects, self.vocab_size,
               self.n_categories, self.n_features) < 1:
            raise ConfigError("all game dimensions must be >= 1")
        if self.n_agents < 2:
            raise ConfigError("a naming game needs at least two agents")
        if self.n_rounds < 0 or self.burn_in < 0:
            raise ConfigError("round counts must be non-negative")
        if self.pairing not in PAIRINGS:
            raise ConfigError("unknown pairing %r" % self.pairing)
        if self.learning not in LEARNINGS:
            raise ConfigError("unknown learning mode %r" % self.learning)
        if self.ablation not in ABLATIONS:
            raise ConfigError("unknown ablation %r" % self.ablation)
        if self.record not in RECORDS:
            raise ConfigError("unknown record mode %r" % self.record)
        if self.pairing == "fixed-pair" and self.n_agents != 2:
            raise ConfigError("fixed-pair pairing requires exactly two agents")
        if self.sign_order is not None:
            order = tuple(int(i) for i in self.sign_order)
            if sorted(order) != list(range(self.vocab_size)):
                raise ConfigError("sign_order must be a permutation of the vocabulary")
            self.sign_order = order

    def to_dict(self) -> dict:
        return asdict(self)


class LearningAgentState:
    """Mutable per-agent state: counts, per-object signs and categories.

    learning="gibbs" uses collapsed leave-one-out predictives; "map" uses
    point tables (posterior means) refreshed at each learning step.  With
    batched=True all predictives during one direction pass read a snapshot
    taken at its start, and the counts are rebuilt from assignments at the
    learning step; otherwise counts update incrementally.
    """

    def __init__(self, model: pgm.AgentModel, obs: np.ndarray,
                 signs: np.ndarray, latents: np.ndarray,
                 learning: str = "gibbs", batched: bool = False):
        self.model = model
        self.obs = np.asarray(obs, dtype=np.int64)
        self.signs = np.asarray(signs, dtype=np.int64)
        self.latents = np.asarray(latents, dtype=np.int64)
        self.learning = learning
        # map mode snapshots point tables instead; counts stay incremental
        self.batched = batched and learning == "gibbs"
        self._snap_model = None
        self._snap_signs = None
        self._snap_latents = None
        self._log_phi = None
        self._log_theta = None

    frozen = False

    # -- views -------------------------------------------------------------

    def _view(self):
        if self.batched and self._snap_model is not None:
            return self._snap_model, self._snap_signs, self._snap_latents
        return self.model, self.signs, self.latents

    def begin_direction(self):
        if self.learning == "map":
            self._log_phi = pgm.latent_table(self.model)
            pseudo = self.model.theta_counts + self.model.alpha_theta
            self._log_theta = np.log(pseudo) - np.log(pseudo.sum(axis=1, keepdims=True))
        elif self.batched:
            self._snap_model = self.model.copy()
            self._snap_signs = self.signs.copy()
            self._snap_latents = self.latents.copy()

    def end_direction(self):
        """Learning step: parameters catch up with the round's assignments."""
        if self.batched and self._snap_model is not None:
            phi, theta = pgm.rebuild_counts(self.obs, self.signs, self.latents,
                                            self.model.n_signs,
                                            self.model.n_categories)
            self.model.phi_counts = phi
            self.model.theta_counts = theta
            self._snap_model = None

    # -- predictives -------------------------------------------------------

    def sign_loglik_vector(self, d: int) -> np.ndarray:
        """log p(z_d | m, own params) as a function of the sign m."""
        if self.learning == "map":
            return self._map_phi()[:, self.latents[d]]
        model, signs, latents = self._view()
        return pgm.sign_loglik_vector(model, int(self.latents[d]),
                                      exclude=(int(signs[d]), int(latents[d])))

    def latent_logdist(self, d: int) -> np.ndarray:
        """Normalized log conditional over categories for object d."""
        if self.learning == "map":
            scores = self._map_phi()[self.signs[d]] + self._map_theta() @ self.obs[d]
            return log_normalize(scores)
        model, signs, latents = self._view()
        scores = (pgm.latent_predictive_vector(model, self.signs[d],
                                               exclude=(signs[d], latents[d]))
                  + pgm.obs_loglik_vector(model, self.obs[d],
                                          exclude_from=latents[d]))
        return log_normalize(scores)

    def _map_phi(self):
        if self._log_phi is None:
            self.begin_direction()
        return self._log_phi

    def _map_theta(self):
        if self._log_theta is None:
            self.begin_direction()
        return self._log_theta

    # -- mutations ---------------------------------------------------------

    def set_latent(self, d: int, z: int):
        old = int(self.latents[d])
        if z == old:
            return
        if not self.batched:
            s = int(self.signs[d])
            self.model.phi_counts[s, old] -= 1
            self.model.phi_counts[s, z] += 1
            self.model.theta_counts[old] -= self.obs[d]
            self.model.theta_counts[z] += self.obs[d]
        self.latents[d] = z

    def set_sign(self, d: int, m: int):
        old = int(self.signs[d])
        if m == old:
            return
        if not self.batched:
            z = int(self.latents[d])
            self.model.phi_counts[old, z] -= 1
            self.model.phi_counts[m, z] += 1
        self.signs[d] = m


class FrozenAgentState:
    """Fixed conditional tables and fixed categories; only signs move."""

    frozen = True

    def __init__(self, log_pz: np.ndarray, latents: np.ndarray,
                 signs: np.ndarray):
        self.log_pz = np.asarray(log_pz, dtype=float)
        self.latents = np.asarray(latents, dtype=np.int64)
        self.signs = np.asarray(signs, dtype=np.int64)
        if self.log_pz.ndim != 2:
            raise ContractError("frozen table must be (M, C)")

    def begin_direction(self):
        pass

    def end_direction(self):
        pass

    def sign_loglik_vector(self, d: int) -> np.ndarray:
        return self.log_pz[:, self.latents[d]]

    def set_sign(self, d: int, m: int):
        self.signs[d] = m


# ---------------------------------------------------------------------------
# The MH exchange primitives (also driven by verify's kernel assembly).


def mh_propose_logits(log_prior: np.ndarray, speaker_factor: np.ndarray) -> np.ndarray:
    """Normalized log proposal: prior times the speaker's likelihood factor."""
    return log_normalize(log_prior + speaker_factor)


def mh_accept_log_gamma(listener_factor: np.ndarray, proposed: int,
                        current: int) -> float:
    """log min(1, listener likelihood ratio of proposed vs current sign)."""
    return min(0.0, float(listener_factor[proposed] - listener_factor[current]))


def sign_proposal_dist(speaker, d: int, prior: LogDist) -> np.ndarray:
    """The speaker's sign posterior for object d, as normalized log probs."""
    return mh_propose_logits(prior.values, speaker.sign_loglik_vector(d))


def propose_sign(speaker, d: int, prior: LogDist, rng: RandomSource,
                 order=None) -> int:
    return sample_categorical(sign_proposal_dist(speaker, d, prior), rng, order)


def acceptance_probability(listener, d: int, proposed: int, current: int) -> float:
    """gamma = min(1, p(z_d^Li | proposed) / p(z_d^Li | current))."""
    return float(np.exp(mh_accept_log_gamma(listener.sign_loglik_vector(d),
                                            proposed, current)))


def perceive(agent, d: int, rng: RandomSource) -> int:
    """Resample the agent's category for object d from its conditional."""
    if agent.frozen:
        return int(agent.latents[d])
    z = sample_categorical(agent.latent_logdist(d), rng)
    agent.set_latent(d, z)
    return z


# ---------------------------------------------------------------------------
# Game state and loops.


@dataclass
class GameState:
    config: GameConfig
    prior: LogDist
    agents: list
    dataset: pgm.Dataset | None = None


@dataclass
class GameResult:
    config: GameConfig
    events: list | None
    metrics: list
    state: GameState
    occupancy: np.ndarray  # (K, D, M) per-round sign occupancy post burn-in
    occupancy_rounds: int


def exchange_schedule(config: GameConfig, rng_pair: RandomSource) -> list:
    """Ordered (speaker, listener) pairs exercised in one round."""
    k = config.n_agents
    if config.pairing == "random-partner":
        idx = rng_pair.integers(0, k * (k - 1))
        pairs = [(i, j) for i in range(k) for j in range(k) if i != j]
        return [pairs[idx]]
    return [(i, j) for i in range(k) for j in range(k) if i != j]


def init_state(config: GameConfig, dataset: pgm.Dataset,
               prior: LogDist | None = None) -> GameState:
    """Draw initial signs from the prior, then attach objects sequentially."""
    if dataset.n_agents != config.n_agents:
        raise ConfigError("dataset has %d agents, config expects %d"
                          % (dataset.n_agents, config.n_agents))
    if dataset.n_features != config.n_features:
        raise ConfigError("dataset feature size disagrees with config")
    if dataset.n_objects != config.n_objects:
        raise ConfigError("dataset object count disagrees with config")
    prior = prior or pgm.uniform_sign_prior(config.vocab_size)
    root = RandomSource(config.seed)
    agents = []
    for k in range(config.n_agents):
        rng = root.substream(_S_INIT, k)
        model = pgm.AgentModel(config.vocab_size, config.n_categories,
                               config.n_features, config.alpha_phi,
                               config.alpha_theta)
        obs = dataset.counts[k]
        signs = np.empty(config.n_objects, dtype=np.int64)
        latents = np.empty(config.n_objects, dtype=np.int64)
        for d in range(config.n_objects):
            signs[d] = sample_categorical(prior, rng, config.sign_order)
        for d in range(config.n_objects):
            post = pgm.posterior_latent(model, obs[d], int(signs[d]))
            z = sample_categorical(post, rng)
            latents[d] = z
            model.phi_counts[signs[d], z] += 1
            model.theta_counts[z] += obs[d]
        agents.append(LearningAgentState(model, obs, signs, latents,
                                         config.learning, config.batched))
    return GameState(config, prior, agents, dataset)


def frozen_state(config: GameConfig, log_pz_tables, latents,
                 prior: LogDist | None = None,
                 initial_signs=None) -> GameState:
    """State for a frozen-parameter game: fixed tables and fixed categories."""
    prior = prior or pgm.uniform_sign_prior(config.vocab_size)
    latents = np.asarray(latents, dtype=np.int64)
    root = RandomSource(config.seed)
    agents = []
    for k in range(config.n_agents):
        if initial_signs is None:
            rng = root.substream(_S_INIT, k)
            signs = np.array([sample_categorical(prior, rng, config.sign_order)
                              for _ in range(config.n_objects)], dtype=np.int64)
        else:
            signs = np.asarray(initial_signs[k], dtype=np.int64).copy()
        agents.append(FrozenAgentState(log_pz_tables[k], latents[k], signs))
    return GameState(config, prior, agents, None)


def run_round(state: GameState, round_idx: int, root: RandomSource,
              events: list | None):
    """One full round: every scheduled exchange over every object in order."""
    cfg = state.config
    accepted = total = 0
    schedule = exchange_schedule(cfg, root.substream(_S_PAIR, round_idx))
    last_listener = schedule[-1][1]
    for e, (s, l) in enumerate(schedule):
        rng = root.substream(_S_PLAY, round_idx, e)
        sp, li = state.agents[s], state.agents[l]
        sp.begin_direction()
        li.begin_direction()
        for d in range(cfg.n_objects):
            perceive(sp, d, rng)
            perceive(li, d, rng)
            proposed = propose_sign(sp, d, state.prior, rng, cfg.sign_order)
            current = int(li.signs[d])
            gamma = acceptance_probability(li, d, proposed, current)
            u = rng.uniform()
            ok = u < gamma and cfg.ablation != "always-reject"
            if ok:
                li.set_sign(d, proposed)
            accepted += int(ok)
            total += 1
            if events is not None:
                events.append({"type": "exchange", "round": round_idx,
                               "speaker": s, "listener": l, "object": d,
                               "listener_sign": current, "proposed": proposed,
                               "gamma": gamma, "u": u, "accepted": bool(ok)})
        sp.end_direction()
        li.end_direction()
    return accepted / max(total, 1), last_listener


def _round_metrics(state: GameState, round_idx: int, accept_rate: float,
                   eval_agent: int) -> dict:
    from .verify import adjusted_rand_index  # local import, avoids a cycle

    cfg = state.config
    signs = [np.asarray(a.signs) for a in state.agents]
    pair_ari, pair_agree = [], []
    for i in range(cfg.n_agents):
        for j in range(i + 1, cfg.n_agents):
            pair_ari.append(adjusted_rand_index(signs[i], signs[j]))
            pair_agree.append(float(np.mean(signs[i] == signs[j])))
    rec = {"type": "metrics", "round": round_idx,
           "accept_rate": accept_rate,
           "ari": float(np.mean(pair_ari)),
           "agreement": float(np.mean(pair_agree))}
    ds = state.dataset
    if ds is not None and ds.labels is not None:
        rec["ari_truth"] = float(np.mean(
            [adjusted_rand_index(s, ds.labels) for s in signs]))
    if ds is not None and not state.agents[0].frozen:
        point = pgm.WorldAssignment(signs[eval_agent],
                                    np.stack([a.latents for a in state.agents]))
        models = [a.model for a in state.agents]
        rec["cfe"] = pgm.collective_free_energy(
            pgm.AssignmentDist.point_mass(point), ds, models, state.prior).total
    return rec


def audit_state(state: GameState):
    """Check counts == prior-free rebuild from assignments, exactly."""
    for k, a in enumerate(state.agents):
        if a.frozen:
            continue
        phi, theta = pgm.rebuild_counts(a.obs, a.signs, a.latents,
                                        a.model.n_signs, a.model.n_categories)
        if not (np.array_equal(phi, a.model.phi_counts)
                and np.array_equal(theta, a.model.theta_counts)):
            raise PropertyViolation(
                "agent %d sufficient statistics diverge from assignments" % k)


def run_game(config: GameConfig, dataset: pgm.Dataset | None = None,
             state: GameState | None = None) -> GameResult:
    """Play n_rounds from a fresh or supplied state.

    Frozen configurations must supply a state built with frozen_state().
    Occupancy counts each agent's sign per object per round after burn_in.
    """
    if state is None:
        if config.learning == "frozen":
            raise ConfigError("frozen games need an explicit frozen_state()")
        if dataset is None:
            raise ConfigError("learning games need a dataset")
        state = init_state(config, dataset)
    root = RandomSource(config.seed)
    events = [] if config.record == "full" else None
    metrics = []
    occupancy = np.zeros((config.n_agents, config.n_objects, config.vocab_size),
                         dtype=np.int64)
    occ_rounds = 0
    kidx = np.arange(config.n_agents)[:, None]
    didx = np.arange(config.n_objects)[None, :]
    for r in range(config.n_rounds):
        accept_rate, last_listener = run_round(state, r, root, events)
        if r >= config.burn_in:
            allsigns = np.stack([a.signs for a in state.agents])
            occupancy[kidx, didx, allsigns] += 1
            occ_rounds += 1
        if config.record in ("full", "rounds"):
            metrics.append(_round_metrics(state, r, accept_rate, last_listener))
    if config.learning != "frozen":
        audit_state(state)
    return GameResult(config, events, metrics, state, occupancy, occ_rounds)
