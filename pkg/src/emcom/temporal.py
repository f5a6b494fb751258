"""Sign exchange over observation sequences with latent dynamics.

Each agent models an indexed sequence as a hidden Markov chain whose
transition rows are conditioned on the sign: a virtual pre-observation
category z_0 ~ init (sign-free), then z_t | z_{t-1}, m for t = 1..T with
one emitted count vector per step.  Because the first observed step
already passes through the sign-conditioned transition, a length-one
sequence degenerates exactly to the static model's sign-conditional
category prior, which is what ties this layer to the plain naming game.

Sign inference reuses the naming game's proposal and acceptance
primitives.  The default acceptance factor is the collapsed sequence
likelihood log p(x_{1:T} | m) from the forward algorithm; a sampled-path
variant (factor = transition log-likelihood of a posterior path draw)
is available behind a flag.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import naming_game as ng
from . import pgm
from .probcore import (
    ConfigError,
    ContractError,
    LogDist,
    RandomSource,
    SizeCapError,
    log_normalize,
    logsumexp,
    sample_categorical,
)

NORM_TOL = 1e-9
DEFAULT_PATH_CAP = 10**6
SEQ_SCHEMA_VERSION = 1


@dataclass
class TemporalAgentModel:
    """Frozen sequence model: init over z_0, sign-conditioned transitions,
    and a static emission model whose theta tables score each step.

    log_init is (C,), log_trans is (C, M, C) with rows over the last axis,
    emission is the collapsed table model whose obs_loglik_vector supplies
    log p(x_t | z_t).
    """

    log_init: np.ndarray
    log_trans: np.ndarray
    emission: pgm.AgentModel

    def __post_init__(self):
        self.log_init = np.asarray(self.log_init, dtype=float)
        self.log_trans = np.asarray(self.log_trans, dtype=float)
        if self.log_init.ndim != 1:
            raise ContractError("log_init must be a vector over categories")
        c = self.log_init.size
        if self.log_trans.ndim != 3 or self.log_trans.shape[0] != c \
                or self.log_trans.shape[2] != c:
            raise ContractError("log_trans must be (C, M, C)")
        if c != self.emission.n_categories:
            raise ContractError("transition and emission category counts differ")
        if abs(logsumexp(self.log_init)) > NORM_TOL:
            raise ContractError("log_init must be normalized")
        flat = self.log_trans.reshape(-1, c)
        for row in flat:
            if abs(logsumexp(row)) > NORM_TOL:
                raise ContractError("every transition row must be normalized")

    @property
    def n_categories(self) -> int:
        return self.log_init.size

    @property
    def n_signs(self) -> int:
        return self.log_trans.shape[1]

    @property
    def n_features(self) -> int:
        return self.emission.n_features

    @classmethod
    def from_counts(cls, init_counts, trans_counts, emission: pgm.AgentModel,
                    alpha_init: float = pgm.DEFAULT_ALPHA_PHI,
                    alpha_trans: float = pgm.DEFAULT_ALPHA_PHI
                    ) -> "TemporalAgentModel":
        """Collapsed Dirichlet rows: predictive tables from integer counts."""
        if alpha_init <= 0 or alpha_trans <= 0:
            raise ContractError("concentrations must be positive")
        init = np.asarray(init_counts, dtype=float) + alpha_init
        trans = np.asarray(trans_counts, dtype=float) + alpha_trans
        if np.any(init < alpha_init) or np.any(trans < alpha_trans):
            raise ContractError("counts must be non-negative")
        log_init = np.log(init) - np.log(init.sum())
        log_trans = np.log(trans) - np.log(trans.sum(axis=2, keepdims=True))
        return cls(log_init, log_trans, emission)


def emission_loglik_matrix(model: TemporalAgentModel,
                           xs: np.ndarray) -> np.ndarray:
    """(T, C) matrix of log p(x_t | z_t) for one sequence of count vectors."""
    xs = np.asarray(xs, dtype=np.int64)
    if xs.ndim != 2 or xs.shape[0] < 1:
        raise ContractError("sequence must be a non-empty (T, F) count array")
    return np.stack([pgm.obs_loglik_vector(model.emission, x) for x in xs])


@dataclass
class FilterResult:
    """Forward-algorithm output: per-step filtered posteriors over the
    category (log domain, each row normalized) and the exact sequence
    log-likelihood under the conditioning sign."""

    filtered: np.ndarray  # (T, C)
    loglik: float


def forward_filter(model: TemporalAgentModel, xs, m: int) -> FilterResult:
    """Scaled forward pass over the sign-conditioned chain.

    Returns p(z_t | x_{1:t}, m) per step and log p(x_{1:T} | m), both exact
    up to floating point; the predict step at t=1 marginalizes the virtual
    initial category through the transition.
    """
    log_b = emission_loglik_matrix(model, xs)
    t_len = log_b.shape[0]
    step = model.log_trans[:, int(m), :]
    filtered = np.empty_like(log_b)
    loglik = 0.0
    pred = np.array([logsumexp(model.log_init + step[:, c])
                     for c in range(model.n_categories)])
    for t in range(t_len):
        joint = pred + log_b[t]
        z = logsumexp(joint)
        loglik += z
        filtered[t] = joint - z
        if t + 1 < t_len:
            pred = np.array([logsumexp(filtered[t] + step[:, c])
                             for c in range(model.n_categories)])
    return FilterResult(filtered, float(loglik))


def sequence_loglik_vector(model: TemporalAgentModel, xs) -> np.ndarray:
    """log p(x_{1:T} | m) for every sign m; the collapsed exchange factor."""
    return np.array([forward_filter(model, xs, m).loglik
                     for m in range(model.n_signs)])


def enumerate_sequence_loglik(model: TemporalAgentModel, xs, m: int,
                              cap: int = DEFAULT_PATH_CAP) -> float:
    """Brute-force log p(x_{1:T} | m): logsumexp over all latent paths.

    Sums p(z_0) prod_t p(z_t | z_{t-1}, m) p(x_t | z_t) over every path
    z_{0:T}; refuses instances with more than cap paths.
    """
    log_b = emission_loglik_matrix(model, xs)
    t_len = log_b.shape[0]
    c = model.n_categories
    if c ** (t_len + 1) > cap:
        raise SizeCapError("path enumeration needs %d paths, cap is %d"
                           % (c ** (t_len + 1), cap))
    step = model.log_trans[:, int(m), :]
    totals = []
    for path in np.ndindex(*([c] * (t_len + 1))):
        lp = model.log_init[path[0]]
        for t in range(t_len):
            lp += step[path[t], path[t + 1]] + log_b[t, path[t + 1]]
        totals.append(lp)
    return float(logsumexp(np.array(totals)))


def sample_posterior_path(model: TemporalAgentModel, xs, m: int,
                          rng: RandomSource) -> np.ndarray:
    """Draw z_{0:T} ~ p(path | x_{1:T}, m) by backward sampling.

    Forward-filters first, then samples the last category from its filtered
    posterior and walks backward through p(z_t | z_{t+1}, x_{1:t}, m).
    """
    res = forward_filter(model, xs, m)
    t_len = res.filtered.shape[0]
    step = model.log_trans[:, int(m), :]
    path = np.empty(t_len + 1, dtype=np.int64)
    path[t_len] = sample_categorical(res.filtered[-1], rng)
    for t in range(t_len - 1, 0, -1):
        back = log_normalize(res.filtered[t - 1] + step[:, path[t + 1]])
        path[t] = sample_categorical(back, rng)
    back0 = log_normalize(model.log_init + step[:, path[1]])
    path[0] = sample_categorical(back0, rng)
    return path


def path_loglik_vector(model: TemporalAgentModel, path) -> np.ndarray:
    """log p(z-path | m) for every sign; the sampled-path exchange factor.

    The sign-free init term is included, so the vector differs from the
    transition sum by an m-constant that cancels after normalization.
    """
    path = np.asarray(path, dtype=np.int64)
    if path.ndim != 1 or path.size < 2:
        raise ContractError("path must cover z_0..z_T with T >= 1")
    out = np.full(model.n_signs, float(model.log_init[path[0]]))
    for m in range(model.n_signs):
        step = model.log_trans[:, m, :]
        out[m] += float(step[path[:-1], path[1:]].sum())
    return out


# ---------------------------------------------------------------------------
# Exchange state and rounds.


class TemporalAgentState:
    """Sign-exchange adapter over one agent's frozen sequence model.

    sequences is a list of (T, F) count arrays, one per indexed object.
    With collapsed=True the exchange factor is the marginal sequence
    likelihood (deterministic); otherwise each begin_direction() resamples
    a latent path per object under the current sign and the factor is the
    path transition likelihood, mirroring the static game's perceive step.
    """

    frozen = True

    def __init__(self, model: TemporalAgentModel, sequences, signs,
                 collapsed: bool = True, rng: RandomSource | None = None):
        self.model = model
        self.sequences = [np.asarray(x, dtype=np.int64) for x in sequences]
        self.signs = np.asarray(signs, dtype=np.int64).copy()
        if self.signs.shape != (len(self.sequences),):
            raise ContractError("need exactly one current sign per sequence")
        self.collapsed = collapsed
        self.rng = rng
        if not collapsed and rng is None:
            raise ConfigError("the sampled-path variant needs an rng")
        self._marginal = [sequence_loglik_vector(model, x)
                          for x in self.sequences]
        self.paths = [None] * len(self.sequences)

    def begin_direction(self):
        if not self.collapsed:
            for d in range(len(self.sequences)):
                self.paths[d] = sample_posterior_path(
                    self.model, self.sequences[d], int(self.signs[d]), self.rng)

    def end_direction(self):
        pass

    def sign_loglik_vector(self, d: int) -> np.ndarray:
        if self.collapsed:
            return self._marginal[d]
        if self.paths[d] is None:
            raise ContractError("sampled-path factor requested before "
                                "begin_direction")
        return path_loglik_vector(self.model, self.paths[d])

    def set_sign(self, d: int, m: int):
        self.signs[d] = m


class FrozenPathState(TemporalAgentState):
    """Sampled-path state with the paths pinned; used by exact kernel checks
    where the factor must stay constant across the enumeration."""

    def __init__(self, model: TemporalAgentModel, sequences, signs, paths):
        super().__init__(model, sequences, signs, collapsed=False,
                         rng=RandomSource(0))
        self.paths = [np.asarray(p, dtype=np.int64) for p in paths]

    def begin_direction(self):
        pass


def temporal_naming_game_round(agents, prior: LogDist, rng: RandomSource):
    """One round over two agents: each speaks once about every sequence.

    The speaker proposes from prior times its factor, the listener accepts
    with min(1, factor ratio) and on acceptance adopts the sign.  Returns a
    list of exchange event dicts; agent sign arrays mutate in place.
    """
    if len(agents) != 2:
        raise ConfigError("the temporal round is defined for two agents")
    n_objects = len(agents[0].sequences)
    if len(agents[1].sequences) != n_objects:
        raise ContractError("agents must index the same number of sequences")
    events = []
    for s, l in ((0, 1), (1, 0)):
        sp, li = agents[s], agents[l]
        sp.begin_direction()
        li.begin_direction()
        for d in range(n_objects):
            logits = ng.mh_propose_logits(prior.values, sp.sign_loglik_vector(d))
            proposed = sample_categorical(logits, rng)
            current = int(li.signs[d])
            gamma = float(np.exp(ng.mh_accept_log_gamma(
                li.sign_loglik_vector(d), proposed, current)))
            u = rng.uniform()
            ok = u < gamma
            if ok:
                li.set_sign(d, proposed)
            events.append({"speaker": s, "listener": l, "object": d,
                           "listener_sign": current, "proposed": proposed,
                           "gamma": gamma, "u": u, "accepted": bool(ok)})
        sp.end_direction()
        li.end_direction()
    return events


# ---------------------------------------------------------------------------
# Sequence datasets.


@dataclass
class SequenceDataset:
    """Per-agent, per-object count-matrix sequences with optional truth.

    counts has shape (K, D, T, F); labels are ground-truth sign indices
    for external scoring only.
    """

    counts: np.ndarray
    labels: np.ndarray | None = None
    provenance: dict | None = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 4:
            raise ContractError("sequence counts must have shape (K, D, T, F)")
        if np.any(self.counts < 0):
            raise ContractError("feature counts must be non-negative")
        if np.any(self.counts.sum(axis=3) <= 0):
            raise ContractError("every step needs a positive total count")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.counts.shape[1],):
                raise ContractError("labels must have one entry per object")

    @property
    def n_agents(self) -> int:
        return self.counts.shape[0]

    @property
    def n_objects(self) -> int:
        return self.counts.shape[1]

    @property
    def n_steps(self) -> int:
        return self.counts.shape[2]

    @property
    def n_features(self) -> int:
        return self.counts.shape[3]

    def to_json(self) -> dict:
        doc = {"schema_version": SEQ_SCHEMA_VERSION, "K": self.n_agents,
               "D": self.n_objects, "T": self.n_steps, "F": self.n_features,
               "counts": self.counts.tolist()}
        if self.labels is not None:
            doc["labels"] = self.labels.tolist()
        if self.provenance is not None:
            doc["provenance"] = self.provenance
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "SequenceDataset":
        counts = np.asarray(doc["counts"], dtype=np.int64)
        labels = doc.get("labels")
        ds = cls(counts, None if labels is None else np.asarray(labels),
                 doc.get("provenance"))
        header = (doc["K"], doc["D"], doc["T"], doc["F"])
        if (ds.n_agents, ds.n_objects, ds.n_steps, ds.n_features) != header:
            raise ContractError("sequence header disagrees with counts shape")
        return ds

    def save(self, path):
        import json

        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SequenceDataset":
        import json

        with open(path) as fh:
            return cls.from_json(json.load(fh))
