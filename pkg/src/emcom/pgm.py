"""Tabular generative model shared by a population of communicating agents.

World model per object d: a sign m_d ~ prior, and for every agent k a
category z_d^k ~ p(z | m_d, phi^k) plus an observed feature-count vector
x_d^k ~ p(x | z_d^k, theta^k).  phi and theta rows are collapsed
Dirichlet-categorical / Dirichlet-multinomial tables; observation likelihoods
use the exchangeable-sequence (Polya urn) convention, i.e. no multinomial
coefficient.  That constant cancels in every normalized quantity and shifts
evidence and free energy by the same data-only amount, so all identities
checked here hold without it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .probcore import (
    ContractError,
    DomainError,
    LogDist,
    SizeCapError,
    log_normalize,
    logsumexp,
)

DEFAULT_ALPHA_PHI = 1.0
DEFAULT_ALPHA_THETA = 0.1
DEFAULT_ENUM_CAP = 10**7
SCHEMA_VERSION = 1


@dataclass
class Dataset:
    """Observed feature counts for K agents over D shared objects.

    counts has shape (K, D, F); entry [k, d] is agent k's count vector for
    object d.  labels, when present, are ground-truth sign indices used only
    for external scoring.
    """

    counts: np.ndarray
    labels: np.ndarray | None = None
    provenance: dict | None = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 3:
            raise ContractError("dataset counts must have shape (K, D, F)")
        if np.any(self.counts < 0):
            raise ContractError("feature counts must be non-negative")
        if np.any(self.counts.sum(axis=2) <= 0):
            raise ContractError("every observation needs a positive total count")
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
    def n_features(self) -> int:
        return self.counts.shape[2]

    def to_json(self) -> dict:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "K": self.n_agents,
            "D": self.n_objects,
            "F": self.n_features,
            "counts": self.counts.tolist(),
        }
        if self.labels is not None:
            doc["labels"] = self.labels.tolist()
        if self.provenance is not None:
            doc["provenance"] = self.provenance
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "Dataset":
        counts = np.asarray(doc["counts"], dtype=np.int64)
        labels = doc.get("labels")
        ds = cls(counts, None if labels is None else np.asarray(labels),
                 doc.get("provenance"))
        if (ds.n_agents, ds.n_objects, ds.n_features) != (doc["K"], doc["D"], doc["F"]):
            raise ContractError("dataset header disagrees with counts shape")
        return ds

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass
class AgentModel:
    """One agent's collapsed parameter state.

    phi_counts[m, c] counts objects the agent currently maps sign m ->
    category c; theta_counts[c, f] accumulates feature counts of observations
    assigned to category c.  Integer counts are kept apart from the float
    concentrations so bookkeeping stays exact.
    """

    n_signs: int
    n_categories: int
    n_features: int
    alpha_phi: float = DEFAULT_ALPHA_PHI
    alpha_theta: float = DEFAULT_ALPHA_THETA
    phi_counts: np.ndarray = field(default=None)
    theta_counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if min(self.n_signs, self.n_categories, self.n_features) < 1:
            raise ContractError("model dimensions must be >= 1")
        if self.alpha_phi <= 0 or self.alpha_theta <= 0:
            raise ContractError("concentrations must be positive")
        if self.phi_counts is None:
            self.phi_counts = np.zeros((self.n_signs, self.n_categories), dtype=np.int64)
        else:
            self.phi_counts = np.asarray(self.phi_counts, dtype=np.int64)
        if self.theta_counts is None:
            self.theta_counts = np.zeros((self.n_categories, self.n_features),
                                         dtype=np.int64)
        else:
            self.theta_counts = np.asarray(self.theta_counts, dtype=np.int64)
        if self.phi_counts.shape != (self.n_signs, self.n_categories):
            raise ContractError("phi_counts shape mismatch")
        if self.theta_counts.shape != (self.n_categories, self.n_features):
            raise ContractError("theta_counts shape mismatch")
        if np.any(self.phi_counts < 0) or np.any(self.theta_counts < 0):
            raise ContractError("counts must be non-negative")

    def copy(self) -> "AgentModel":
        return AgentModel(self.n_signs, self.n_categories, self.n_features,
                          self.alpha_phi, self.alpha_theta,
                          self.phi_counts.copy(), self.theta_counts.copy())


def _phi_row(agent: AgentModel, m: int, exclude) -> np.ndarray:
    """Pseudo-count row of phi for sign m, minus an excluded assignment."""
    row = agent.phi_counts[m].astype(float)
    if exclude is not None and exclude[0] == m:
        row = row.copy()
        row[exclude[1]] -= 1.0
        if row[exclude[1]] < -1e-9:
            raise ContractError("leave-one-out would make a phi count negative")
    return row + agent.alpha_phi


def log_lik_latent(agent: AgentModel, m: int, z: int, exclude=None) -> float:
    """Collapsed log p(z | m, phi): (alpha + n_mz) / (C alpha + n_m).

    exclude, when given, is the (sign, category) assignment of the object
    being resampled; its single count is removed first (leave-one-out).
    """
    row = _phi_row(agent, m, exclude)
    return float(np.log(row[z]) - np.log(row.sum()))


def latent_predictive_vector(agent: AgentModel, m: int, exclude=None) -> np.ndarray:
    """log p(z | m, phi) over all categories, leave-one-out aware."""
    row = _phi_row(agent, m, exclude)
    return np.log(row) - np.log(row.sum())


def sign_loglik_vector(agent: AgentModel, z: int, exclude=None) -> np.ndarray:
    """log p(z | m, phi) as a function of the sign m, for a fixed category."""
    counts = agent.phi_counts.astype(float)
    if exclude is not None:
        counts = counts.copy()
        counts[exclude[0], exclude[1]] -= 1.0
        if counts[exclude[0], exclude[1]] < -1e-9:
            raise ContractError("leave-one-out would make a phi count negative")
    pseudo = counts + agent.alpha_phi
    return np.log(pseudo[:, z]) - np.log(pseudo.sum(axis=1))


def latent_table(agent: AgentModel) -> np.ndarray:
    """Full (M, C) table of log p(z | m, phi) at the current counts."""
    pseudo = agent.phi_counts + agent.alpha_phi
    return np.log(pseudo) - np.log(pseudo.sum(axis=1, keepdims=True))


def _theta_rows(agent: AgentModel, x: np.ndarray, exclude_from) -> np.ndarray:
    rows = agent.theta_counts.astype(float)
    if exclude_from is not None:
        rows = rows.copy()
        rows[exclude_from] -= x
        if np.any(rows[exclude_from] < -1e-9):
            raise ContractError("leave-one-out would make a theta count negative")
    return rows + agent.alpha_theta


def obs_loglik_vector(agent: AgentModel, x, exclude_from=None) -> np.ndarray:
    """log p(x | z, theta) over all categories for one count vector x.

    Dirichlet-multinomial predictive in sequence form:
        lgamma(A) - lgamma(A + n) + sum_f [lgamma(a_f + x_f) - lgamma(a_f)]
    with a = pseudo-counts of the category row and n = sum(x).  exclude_from
    names the category whose row currently contains x's own counts.
    """
    x = np.asarray(x, dtype=np.int64)
    if x.shape != (agent.n_features,) or np.any(x < 0):
        raise ContractError("observation must be a non-negative F-vector")
    n = int(x.sum())
    if n <= 0:
        raise ContractError("observation must have a positive total count")
    a = _theta_rows(agent, x, exclude_from)
    tot = a.sum(axis=1)
    return (gammaln(tot) - gammaln(tot + n)
            + np.sum(gammaln(a + x[None, :]) - gammaln(a), axis=1))


def log_lik_obs(agent: AgentModel, z: int, x, exclude_from=None) -> float:
    """Collapsed log p(x | z, theta) for a single category z."""
    return float(obs_loglik_vector(agent, x, exclude_from)[z])


def obs_loglik_matrix(agent: AgentModel, obs: np.ndarray) -> np.ndarray:
    """(D, C) matrix of log p(x_d | z, theta) for one agent's observations."""
    return np.stack([obs_loglik_vector(agent, obs[d]) for d in range(obs.shape[0])])


def posterior_latent(agent: AgentModel, x, m: int,
                     exclude=None, exclude_from=None) -> LogDist:
    """Normalized posterior over categories given one observation and a sign."""
    scores = (latent_predictive_vector(agent, m, exclude)
              + obs_loglik_vector(agent, x, exclude_from))
    return LogDist(log_normalize(scores))


def rebuild_counts(obs: np.ndarray, signs: np.ndarray, latents: np.ndarray,
                   n_signs: int, n_categories: int) -> tuple[np.ndarray, np.ndarray]:
    """Recompute (phi_counts, theta_counts) from scratch for one agent.

    Used by the sufficient-statistic audit and by batched learning; obs is
    (D, F), signs and latents are (D,).
    """
    phi = np.zeros((n_signs, n_categories), dtype=np.int64)
    np.add.at(phi, (signs, latents), 1)
    theta = np.zeros((n_categories, obs.shape[1]), dtype=np.int64)
    np.add.at(theta, latents, obs)
    return phi, theta


def uniform_sign_prior(n_signs: int) -> LogDist:
    return LogDist.uniform(n_signs)


# ---------------------------------------------------------------------------
# World assignments and tabulated distributions over them.


@dataclass(frozen=True)
class WorldAssignment:
    """One complete hypothesis: signs (D,) and per-agent latents (K, D)."""

    signs: np.ndarray
    latents: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "signs", np.asarray(self.signs, dtype=np.int64))
        object.__setattr__(self, "latents", np.asarray(self.latents, dtype=np.int64))
        if self.signs.ndim != 1 or self.latents.ndim != 2:
            raise ContractError("signs must be (D,), latents (K, D)")
        if self.latents.shape[1] != self.signs.shape[0]:
            raise ContractError("latents and signs disagree on object count")

    def key(self) -> tuple:
        return (self.signs.tobytes(), self.latents.tobytes())


@dataclass
class AssignmentDist:
    """Explicit tabulated distribution over world assignments.

    support entries must be distinct; log_probs must be normalized.  Serves
    both as the q of a free-energy evaluation and as the output format of the
    exhaustive posterior enumerations.
    """

    support: list
    log_probs: np.ndarray

    def __post_init__(self):
        self.log_probs = np.asarray(self.log_probs, dtype=float)
        if len(self.support) != self.log_probs.size or not self.support:
            raise ContractError("support and log_probs must align and be non-empty")
        if abs(logsumexp(self.log_probs)) > 1e-9:
            raise ContractError("AssignmentDist must be normalized")
        keys = {a.key() for a in self.support}
        if len(keys) != len(self.support):
            raise ContractError("duplicate assignments in support")

    @classmethod
    def point_mass(cls, assignment: WorldAssignment) -> "AssignmentDist":
        return cls([assignment], np.zeros(1))

    @classmethod
    def from_samples(cls, samples) -> "AssignmentDist":
        """Empirical distribution of a sample list (duplicates aggregated)."""
        counts: dict = {}
        rep: dict = {}
        for a in samples:
            k = a.key()
            counts[k] = counts.get(k, 0) + 1
            rep.setdefault(k, a)
        keys = sorted(counts)
        total = sum(counts.values())
        lp = np.log(np.array([counts[k] for k in keys], dtype=float) / total)
        return cls([rep[k] for k in keys], lp)


@dataclass
class CfeReport:
    """Collective free energy split into its named parts.

    total = collective_reg + sum_k (pred_error[k] + individual_reg[k]).
    collective_reg is E_q KL(q(m | all latents) || p(m)); pred_error[k] is
    agent k's expected negative observation log likelihood; individual_reg[k]
    compares q's latent factor for agent k (chain-rule conditional given
    agents < k, which reduces to the mean-field factor for factorized q)
    against p(z | m, phi^k).
    """

    total: float
    collective_reg: float
    pred_error: np.ndarray
    individual_reg: np.ndarray


def _frozen_tables(dataset: Dataset, agents) -> tuple[list, list]:
    if len(agents) != dataset.n_agents:
        raise ContractError("one agent model per dataset agent required")
    log_pz = [latent_table(a) for a in agents]
    obs_ll = [obs_loglik_matrix(a, dataset.counts[k]) for k, a in enumerate(agents)]
    return log_pz, obs_ll


def joint_log_prob(assignment: WorldAssignment, dataset: Dataset, agents,
                   prior: LogDist, tables=None) -> float:
    """log p(m, {z}, {x}) at one assignment under the current agent tables."""
    log_pz, obs_ll = tables if tables is not None else _frozen_tables(dataset, agents)
    d_idx = np.arange(dataset.n_objects)
    total = float(prior.values[assignment.signs].sum())
    for k in range(dataset.n_agents):
        zk = assignment.latents[k]
        total += float(log_pz[k][assignment.signs, zk].sum())
        total += float(obs_ll[k][d_idx, zk].sum())
    return total


def log_evidence(dataset: Dataset, agents, prior: LogDist,
                 cap: int = DEFAULT_ENUM_CAP) -> float:
    """Exact log p({x}) by per-object analytic marginalization.

    Objects are independent given the frozen tables, so the evidence is a sum
    of per-object logsumexps over signs of the product of per-agent category
    marginals.  Refuses instances whose implied enumeration exceeds cap.
    """
    if len(prior) != agents[0].n_signs:
        raise ContractError("prior size must match the sign vocabulary")
    m_size = len(prior)
    c_size = agents[0].n_categories
    entries = dataset.n_objects * m_size * c_size ** dataset.n_agents
    if entries > cap:
        raise SizeCapError(
            "evidence enumeration needs %d entries, cap is %d" % (entries, cap))
    log_pz, obs_ll = _frozen_tables(dataset, agents)
    total = 0.0
    for d in range(dataset.n_objects):
        per_sign = prior.values.copy()
        for k in range(dataset.n_agents):
            inner = log_pz[k] + obs_ll[k][d][None, :]
            per_sign = per_sign + np.array([logsumexp(row) for row in inner])
        total += logsumexp(per_sign)
    return float(total)


def collective_free_energy(q: AssignmentDist, dataset: Dataset, agents,
                           prior: LogDist) -> CfeReport:
    """Evaluate the collective free energy of a tabulated q.

    The three parts follow the canonical decomposition
        F = E KL(q(m|{z}) || p(m))
          + sum_k E[-log p(x_k|z_k)]
          + sum_k E[log q(z_k | z_{<k}) - log p(z_k | m)]
    with expectations under q.  The chain-rule conditionals make the identity
    total = E_q[log q - log p(m, {z}, {x})] exact for any tabulated q, and
    collapse to the usual mean-field reading when q factorizes over agents.
    """
    n_agents = dataset.n_agents
    tables = _frozen_tables(dataset, agents)
    log_pz, obs_ll = tables
    d_idx = np.arange(dataset.n_objects)

    atoms = q.support
    lq = q.log_probs
    w = np.exp(lq)

    # Marginals of q over latent prefixes (agents 1..k) and the full latent
    # block, accumulated per atom via shared keys.
    def marginal(keyfun):
        buckets: dict = {}
        for i, a in enumerate(atoms):
            buckets.setdefault(keyfun(a), []).append(lq[i])
        vals = {k: logsumexp(np.array(v)) for k, v in buckets.items()}
        return np.array([vals[keyfun(a)] for a in atoms])

    lq_zfull = marginal(lambda a: a.latents.tobytes())
    lq_prefix = [np.zeros(len(atoms))]
    for k in range(1, n_agents + 1):
        lq_prefix.append(marginal(lambda a, k=k: a.latents[:k].tobytes()))

    collective = 0.0
    pred = np.zeros(n_agents)
    ind = np.zeros(n_agents)
    for i, a in enumerate(atoms):
        if w[i] == 0.0:
            continue
        log_p_m = float(prior.values[a.signs].sum())
        collective += w[i] * (lq[i] - lq_zfull[i] - log_p_m)
        for k in range(n_agents):
            zk = a.latents[k]
            pred[k] -= w[i] * float(obs_ll[k][d_idx, zk].sum())
            reg_prior = float(log_pz[k][a.signs, zk].sum())
            ind[k] += w[i] * (lq_prefix[k + 1][i] - lq_prefix[k][i] - reg_prior)
    total = collective + float(pred.sum() + ind.sum())
    return CfeReport(total, float(collective), pred, ind)


def free_energy_direct(q: AssignmentDist, dataset: Dataset, agents,
                       prior: LogDist) -> float:
    """Independent single-pass E_q[log q - log p(m, {z}, {x})] cross-check."""
    tables = _frozen_tables(dataset, agents)
    total = 0.0
    for lqi, a in zip(q.log_probs, q.support):
        wi = float(np.exp(lqi))
        if wi == 0.0:
            continue
        total += wi * (float(lqi) - joint_log_prob(a, dataset, agents, prior, tables))
    return total
