"""Brute-force oracles: enumeration, exact kernels, and agreement metrics.

Everything here is deliberately slow and literal.  Kernel assembly reuses the
simulator's own proposal and acceptance functions so that a bug (or an
injected mutation) in the engine is visible to the exact checks, while the
targets are computed from first principles.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import naming_game as ng
from .pgm import (
    AssignmentDist,
    Dataset,
    WorldAssignment,
    latent_table,
    obs_loglik_matrix,
    uniform_sign_prior,
)
from .probcore import (
    ContractError,
    LogDist,
    PropertyViolation,
    SizeCapError,
    kl_divergence,
    log_normalize,
    logsumexp,
)

DEFAULT_ENUM_CAP = 10**7
POWER_TOL = 1e-13
POWER_MAX_ITERS = 200_000
CROSS_CHECK_TOL = 1e-10


@dataclass
class KernelMatrix:
    """A row-stochastic transition matrix plus a description of its origin."""

    matrix: np.ndarray
    meta: dict

    def __post_init__(self):
        t = np.asarray(self.matrix, dtype=float)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise ContractError("kernel must be square")
        if np.any(t < -1e-15):
            raise ContractError("kernel has negative entries")
        if np.max(np.abs(t.sum(axis=1) - 1.0)) > 1e-12:
            raise ContractError("kernel rows must sum to one")
        self.matrix = t


@dataclass
class SignPosterior:
    """Exhaustive posterior over sign tuples (latents marginalized).

    support is an (N, D) integer array of sign tuples; per_object holds the
    per-object marginal posteriors that the joint factorizes into.
    """

    support: np.ndarray
    log_probs: np.ndarray
    per_object: list


def sign_target_given_latents(log_pz_tables, latents_d, prior: LogDist) -> LogDist:
    """Exact p(m | z^1..z^K) for one object with fixed categories.

    Proportional to p(m) * prod_k p(z_k | m); this is the stationary target
    of the communication kernel.
    """
    scores = prior.values.copy()
    for table, z in zip(log_pz_tables, latents_d):
        scores = scores + np.asarray(table)[:, int(z)]
    return LogDist(log_normalize(scores))


def enumerate_posterior(dataset: Dataset, agents, prior: LogDist,
                        marginalize_latents: bool = True,
                        cap: int = DEFAULT_ENUM_CAP):
    """Exhaustive posterior over assignments given the observations.

    With marginalize_latents the per-agent categories are summed out
    analytically per object and a SignPosterior over sign tuples is returned;
    otherwise the full joint over signs and categories is tabulated as an
    AssignmentDist.  Refuses instances whose table would exceed cap entries.
    """
    n_agents, n_objects = dataset.n_agents, dataset.n_objects
    m_size = len(prior)
    c_size = agents[0].n_categories
    log_pz = [latent_table(a) for a in agents]
    obs_ll = [obs_loglik_matrix(a, dataset.counts[k])
              for k, a in enumerate(agents)]

    if marginalize_latents:
        entries = m_size ** n_objects
        if entries > cap:
            raise SizeCapError("sign enumeration needs %d entries, cap is %d"
                               % (entries, cap))
        per_object = []
        for d in range(n_objects):
            scores = prior.values.copy()
            for k in range(n_agents):
                inner = log_pz[k] + obs_ll[k][d][None, :]
                scores = scores + np.array([logsumexp(row) for row in inner])
            per_object.append(log_normalize(scores))
        support = np.array(list(itertools.product(range(m_size),
                                                  repeat=n_objects)),
                           dtype=np.int64)
        log_probs = np.zeros(support.shape[0])
        for d in range(n_objects):
            log_probs += per_object[d][support[:, d]]
        return SignPosterior(support, log_probs, per_object)

    local_size = m_size * c_size ** n_agents
    entries = local_size ** n_objects
    if entries > cap:
        raise SizeCapError("joint enumeration needs %d entries, cap is %d"
                           % (entries, cap))
    locals_per_d = []
    for d in range(n_objects):
        rows = []
        for m in range(m_size):
            for zs in itertools.product(range(c_size), repeat=n_agents):
                lp = float(prior.values[m]) + sum(
                    float(log_pz[k][m, zs[k]] + obs_ll[k][d, zs[k]])
                    for k in range(n_agents))
                rows.append((m, zs, lp))
        norm = logsumexp(np.array([r[2] for r in rows]))
        locals_per_d.append([(m, zs, lp - norm) for m, zs, lp in rows])
    support, log_probs = [], []
    for combo in itertools.product(*locals_per_d):
        signs = np.array([c[0] for c in combo], dtype=np.int64)
        latents = np.array([[c[1][k] for c in combo]
                            for k in range(n_agents)], dtype=np.int64)
        support.append(WorldAssignment(signs, latents))
        log_probs.append(sum(c[2] for c in combo))
    return AssignmentDist(support, np.array(log_probs))


def build_exchange_kernel(speaker, listener, d: int, prior: LogDist,
                          protocol: str = "naming-game") -> KernelMatrix:
    """Exact M x M matrix of one speaker->listener exchange for object d.

    Built by enumerating the simulator's own proposal distribution and
    acceptance probabilities, so it inherits any defect of those functions.
    """
    q = np.exp(ng.sign_proposal_dist(speaker, d, prior))
    m_size = q.size
    t = np.zeros((m_size, m_size))
    for cur in range(m_size):
        for prop in range(m_size):
            gamma = ng.acceptance_probability(listener, d, prop, cur)
            t[cur, prop] += q[prop] * gamma
            t[cur, cur] += q[prop] * (1.0 - gamma)
    return KernelMatrix(t, {"protocol": protocol, "object": int(d),
                            "direction": "speaker->listener"})


def build_cycle_kernel(state_a, state_b, d: int, prior: LogDist,
                       protocol: str = "naming-game") -> KernelMatrix:
    """One full turn-taking cycle: A speaks to B, then B speaks to A."""
    t_ab = build_exchange_kernel(state_a, state_b, d, prior, protocol).matrix
    t_ba = build_exchange_kernel(state_b, state_a, d, prior, protocol).matrix
    return KernelMatrix(t_ab @ t_ba, {"protocol": protocol, "object": int(d),
                                      "direction": "cycle"})


def _matrix(kernel) -> np.ndarray:
    return kernel.matrix if isinstance(kernel, KernelMatrix) else np.asarray(kernel)


def stationary_distribution(kernel, tol: float = POWER_TOL,
                            cross_check: bool = True) -> np.ndarray:
    """Fixed point of a row-stochastic kernel by power iteration.

    Iterates rho <- rho T to residual below tol, then cross-checks against a
    direct linear solve of the stationarity equations; disagreement beyond
    CROSS_CHECK_TOL raises PropertyViolation.
    """
    t = _matrix(kernel)
    n = t.shape[0]
    rho = np.full(n, 1.0 / n)
    for _ in range(POWER_MAX_ITERS):
        nxt = rho @ t
        nxt = nxt / nxt.sum()
        if np.abs(nxt - rho).sum() < tol:
            rho = nxt
            break
        rho = nxt
    else:
        raise PropertyViolation("power iteration did not reach residual %g" % tol)
    if cross_check:
        a = t.T - np.eye(n)
        a[-1, :] = 1.0
        b = np.zeros(n)
        b[-1] = 1.0
        direct = np.linalg.solve(a, b)
        if np.max(np.abs(direct - rho)) > CROSS_CHECK_TOL:
            raise PropertyViolation(
                "power iteration and linear solve disagree on the fixed point")
    return rho


def check_detailed_balance(kernel, target) -> float:
    """Max entrywise |pi_i T_ij - pi_j T_ji| against a given target."""
    t = _matrix(kernel)
    pi = target.probs() if isinstance(target, LogDist) else np.asarray(target)
    flow = pi[:, None] * t
    return float(np.max(np.abs(flow - flow.T)))


def kl_trajectory(kernel, target, start, n_steps: int,
                  tol: float | None = 1e-12) -> list:
    """KL(rho_t || target) for t = 0..n_steps under repeated kernel steps.

    With a stationary target this sequence is non-increasing; any per-step
    increase beyond tol raises PropertyViolation (pass tol=None to skip).
    """
    t = _matrix(kernel)
    pi = target.probs() if isinstance(target, LogDist) else np.asarray(target)
    if np.any(pi <= 0):
        raise ContractError("target must have full support")
    rho = start.probs() if isinstance(start, LogDist) else np.asarray(start, float)
    values = []
    for step in range(n_steps + 1):
        mask = rho > 0
        values.append(float(np.sum(rho[mask] * (np.log(rho[mask])
                                                - np.log(pi[mask])))))
        if step < n_steps:
            rho = rho @ t
    if tol is not None:
        for i in range(n_steps):
            if values[i + 1] > values[i] + tol:
                raise PropertyViolation(
                    "KL increased at step %d by %.3e" % (i + 1,
                                                         values[i + 1] - values[i]))
    return values


def _comb2(x):
    return x * (x - 1) / 2.0


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Chance-adjusted pairwise agreement of two labelings of the same items.

    Pair-counting form: (RI - E[RI]) / (max RI - E[RI]).  1 for identical
    partitions, ~0 at chance; degenerate identical trivial partitions give 1.
    """
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.shape != b.shape or a.size == 0:
        raise ContractError("labelings must be equal-length and non-empty")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    sum_cells = _comb2(table.astype(float)).sum()
    sum_rows = _comb2(table.sum(axis=1).astype(float)).sum()
    sum_cols = _comb2(table.sum(axis=0).astype(float)).sum()
    total = _comb2(float(n))
    expected = sum_rows * sum_cols / total
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


# ---------------------------------------------------------------------------
# Randomized frozen instances for the kernel batteries.


def random_frozen_instance(rng, n_agents: int = 2, m_size: int = 2,
                           c_size: int = 2, n_objects: int = 1) -> dict:
    """Random frozen tables, fixed categories and a random positive prior."""
    log_pz = [np.log(np.stack([rng.dirichlet(np.ones(c_size))
                               for _ in range(m_size)]))
              for _ in range(n_agents)]
    latents = np.stack([[rng.integers(0, c_size) for _ in range(n_objects)]
                        for _ in range(n_agents)]).astype(np.int64)
    prior = LogDist.from_probs(rng.dirichlet(np.ones(m_size) * 5.0))
    return {"log_pz": log_pz, "latents": latents, "prior": prior,
            "m_size": m_size, "c_size": c_size, "n_objects": n_objects}


def frozen_instance_states(inst, config_seed: int = 0):
    """FrozenAgentStates for an instance, signs initialized to zero."""
    n_agents, n_objects = inst["latents"].shape
    return [ng.FrozenAgentState(inst["log_pz"][k], inst["latents"][k],
                                np.zeros(n_objects, dtype=np.int64))
            for k in range(n_agents)]
