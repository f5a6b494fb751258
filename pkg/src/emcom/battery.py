"""Oracle battery: exact cross-checks for every module in one report format.

Each check compares a simulator quantity against an independent enumeration
or closed form and emits one record carrying an instance hash, a scalar
metric, the tolerance, and whether it passed.  run_battery collects the
whole suite; mutation_battery reruns the kernel and perception oracles
against deliberately broken exchange primitives and passes only when every
defect is detected.  The command line verify mode and the acceptance tests
both consume these reports.
"""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from . import marl
from . import naming_game as ng
from . import pgm
from . import signaling
from . import temporal
from . import verify
from .probcore import LogDist, RandomSource, log_normalize, logsumexp

KERNEL_TOL = 1e-10
KL_STEP_TOL = 1e-12
CFE_TOL = 1e-10
ELBO_BOUND_TOL = 1e-10
SIGNALING_BOUND_TOL = 1e-12
SIGNALING_EQ_TOL = 1e-9
REGROUP_TOL = 1e-12
GRAD_TOL = 1e-6
ACHIEVE_TOL = 1e-3
CAI_TOL = 1e-10
GIBBS_TOL = 1e-10
TEMPORAL_TOL = 1e-10

# Gradient-ascent budget for the perfect-communication check.
ACHIEVE_RESTARTS = 3
ACHIEVE_LR = 5.0
ACHIEVE_ITERS = 4000

# Detection floors: a mutation report passes when the measured deviation of
# the broken primitive exceeds the floor, i.e. when the oracle caught it.
MUTATION_DB_FLOOR = 1e-3
MUTATION_TV_FLOOR = 1e-4
MUTATION_GIBBS_FLOOR = 1e-3


@dataclass(frozen=True)
class CheckReport:
    check: str
    instance: str
    metric: str
    value: float
    tolerance: float
    passed: bool

    def to_json(self) -> dict:
        return {"check": self.check, "instance hash": self.instance,
                "metric": self.metric, "value": self.value,
                "tolerance": self.tolerance, "pass": self.passed}


def _jsonable(x):
    if isinstance(x, np.ndarray):
        x = x.tolist()
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        return round(float(x), 12)
    return x


def instance_hash(payload) -> str:
    """Short stable digest of the parameters that define one check instance."""
    blob = json.dumps(_jsonable(payload), sort_keys=True)
    return hashlib.sha1(blob.encode()).hexdigest()[:12]


def _leq(check: str, inst: str, metric: str, value: float,
         tol: float) -> CheckReport:
    return CheckReport(check, inst, metric, float(value), float(tol),
                       bool(value <= tol))


def _detect(check: str, inst: str, metric: str, value: float,
            floor: float) -> CheckReport:
    return CheckReport(check, inst, metric, float(value), float(floor),
                       bool(value >= floor))


def _tv(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


# ---------------------------------------------------------------------------
# Naming-game exchange kernels.


def naming_kernel_battery(seed: int = 0, n_instances: int = 25) -> list:
    """Exchange and cycle kernels on randomized frozen instances.

    The single-exchange kernel must have the enumerated sign posterior as its
    fixed point and satisfy detailed balance entrywise; the two-direction
    cycle kernel must share the fixed point.
    """
    rng = np.random.default_rng(seed)
    reports = []
    for i in range(n_instances):
        m_size = (2, 3, 4)[i % 3]
        c_size = (2, 3)[i % 2]
        inst = verify.random_frozen_instance(rng, m_size=m_size, c_size=c_size)
        states = verify.frozen_instance_states(inst)
        target = verify.sign_target_given_latents(
            inst["log_pz"], inst["latents"][:, 0], inst["prior"]).probs()
        h = instance_hash({"battery": "naming-kernel", "i": i,
                           "log_pz": inst["log_pz"],
                           "latents": inst["latents"],
                           "prior": inst["prior"].values})
        kern = verify.build_exchange_kernel(states[0], states[1], 0,
                                            inst["prior"])
        rho = verify.stationary_distribution(kern)
        reports.append(_leq("naming-kernel-stationary", h, "tv",
                            _tv(rho, target), KERNEL_TOL))
        reports.append(_leq("naming-kernel-balance", h, "max_flow_gap",
                            verify.check_detailed_balance(kern, target),
                            KERNEL_TOL))
        cyc = verify.build_cycle_kernel(states[0], states[1], 0, inst["prior"])
        reports.append(_leq("naming-cycle-stationary", h, "tv",
                            _tv(verify.stationary_distribution(cyc), target),
                            KERNEL_TOL))
    return reports


def kl_battery(seed: int = 1, n_pairs: int = 100, n_steps: int = 40) -> list:
    """KL to the stationary target never increases along kernel iterates."""
    rng = np.random.default_rng(seed)
    reports = []
    for i in range(n_pairs):
        m_size = (2, 3, 4)[i % 3]
        c_size = (2, 3)[i % 2]
        inst = verify.random_frozen_instance(rng, m_size=m_size, c_size=c_size)
        states = verify.frozen_instance_states(inst)
        target = verify.sign_target_given_latents(
            inst["log_pz"], inst["latents"][:, 0], inst["prior"])
        kern = verify.build_exchange_kernel(states[0], states[1], 0,
                                            inst["prior"])
        start = rng.dirichlet(np.ones(m_size))
        vals = verify.kl_trajectory(kern, target, start, n_steps, tol=None)
        worst = max(b - a for a, b in zip(vals, vals[1:]))
        h = instance_hash({"battery": "kl", "i": i, "start": start,
                           "prior": inst["prior"].values,
                           "log_pz": inst["log_pz"],
                           "latents": inst["latents"]})
        reports.append(_leq("kl-monotone", h, "max_step_increase", worst,
                            KL_STEP_TOL))
    return reports


# ---------------------------------------------------------------------------
# Collective free energy and its bound.


def _random_cfe_instance(rng, n_objects: int, m_size: int):
    c_size, n_features = 2, 3
    counts = rng.integers(0, 5, size=(2, n_objects, n_features))
    counts[:, :, 0] += 1
    dataset = pgm.Dataset(counts)
    agents = [pgm.AgentModel(m_size, c_size, n_features,
                             phi_counts=rng.integers(0, 4, (m_size, c_size)),
                             theta_counts=rng.integers(0, 4, (c_size,
                                                              n_features)))
              for _ in range(2)]
    prior = LogDist.from_probs(rng.dirichlet(np.full(m_size, 4.0)))
    return dataset, agents, prior


def cfe_battery(seed: int = 2, n_instances: int = 20, n_q: int = 5) -> list:
    """Free-energy decomposition, direct-identity, bound, and tightness.

    Per instance: the three-term total equals KL(q || posterior) minus log
    evidence (both computed by independent enumerations), equals the direct
    single-pass expectation, lower-bounds the evidence for random q, and is
    tight at the exact posterior.  Sign marginals of the two enumeration
    modes must also agree.
    """
    rng = np.random.default_rng(seed)
    reports = []
    for i in range(n_instances):
        n_objects = 1 + i % 2
        m_size = 2 + (i // 2) % 2
        dataset, agents, prior = _random_cfe_instance(rng, n_objects, m_size)
        post = verify.enumerate_posterior(dataset, agents, prior,
                                          marginalize_latents=False)
        sign_post = verify.enumerate_posterior(dataset, agents, prior,
                                               marginalize_latents=True)
        logev = pgm.log_evidence(dataset, agents, prior)
        h = instance_hash({"battery": "cfe", "i": i,
                           "counts": dataset.counts,
                           "phi": [a.phi_counts for a in agents],
                           "theta": [a.theta_counts for a in agents],
                           "prior": prior.values})

        marg_gap = 0.0
        for d in range(n_objects):
            buckets = np.full(m_size, -np.inf)
            for lp, a in zip(post.log_probs, post.support):
                m = int(a.signs[d])
                buckets[m] = np.logaddexp(buckets[m], lp)
            marg_gap = max(marg_gap, float(np.abs(
                np.exp(buckets) - np.exp(sign_post.per_object[d])).max()))
        reports.append(_leq("posterior-marginalization", h, "max_abs_gap",
                            marg_gap, CFE_TOL))

        for j in range(n_q):
            lq = log_normalize(np.log(rng.dirichlet(
                np.ones(len(post.support)))))
            q = pgm.AssignmentDist(post.support, lq)
            total = pgm.collective_free_energy(q, dataset, agents,
                                               prior).total
            if j == 0:
                kl = float(np.sum(np.exp(lq) * (lq - post.log_probs)))
                reports.append(_leq("cfe-decomposition", h, "abs_gap",
                                    abs(total - (kl - logev)), CFE_TOL))
                direct = pgm.free_energy_direct(q, dataset, agents, prior)
                reports.append(_leq("cfe-direct-identity", h, "abs_gap",
                                    abs(total - direct), CFE_TOL))
            reports.append(_leq("elbo-bound", h, "bound_gap",
                                (-total) - logev, ELBO_BOUND_TOL))
        at_post = pgm.collective_free_energy(post, dataset, agents,
                                             prior).total
        reports.append(_leq("elbo-tight-at-posterior", h, "abs_gap",
                            abs((-at_post) - logev), ELBO_BOUND_TOL))
    return reports


# ---------------------------------------------------------------------------
# Signaling games.


def _signaling_value(log_px, sender, receiver, prior, beta) -> float:
    if prior is None:
        return signaling.reconstruction_objective(log_px, sender, receiver)
    return signaling.elbo_objective(log_px, sender, receiver, prior,
                                    beta).total


def _central_diff(fun, arr, eps: float = 1e-5) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    grad = np.zeros_like(arr)
    flat_a, flat_g = arr.ravel(), grad.ravel()
    for i in range(flat_a.size):
        orig = flat_a[i]
        flat_a[i] = orig + eps
        hi = fun(arr)
        flat_a[i] = orig - eps
        lo = fun(arr)
        flat_a[i] = orig
        flat_g[i] = (hi - lo) / (2.0 * eps)
    return grad


def signaling_battery(seed: int = 3, n_instances: int = 100) -> list:
    """Reconstruction bound, tightness at the Bayes decoder, objective
    regroupings, and analytic-versus-numeric gradients."""
    rng = np.random.default_rng(seed)
    reports = []
    for i in range(n_instances):
        x_size = 2 + i % 3
        m_size = 2 + (i // 3) % 3
        inst = signaling.random_instance(rng, x_size, m_size, scale=1.5)
        log_px = inst["log_px"]
        h = instance_hash({"battery": "signaling", "i": i, **inst})

        j_rec = signaling.reconstruction_objective(log_px,
                                                   inst["sender_logits"],
                                                   inst["receiver_logits"])
        h_x = signaling.source_entropy(log_px)
        mi = signaling.mutual_information(log_px, inst["sender_logits"])
        reports.append(_leq("signaling-bound", h, "bound_gap",
                            j_rec + h_x - mi, SIGNALING_BOUND_TOL))

        bayes = signaling.posterior_receiver(log_px, inst["sender_logits"])
        j_best = signaling.reconstruction_objective(log_px,
                                                    inst["sender_logits"],
                                                    bayes)
        reports.append(_leq("signaling-bound-tight", h, "abs_gap",
                            abs(j_best + h_x - mi), SIGNALING_EQ_TOL))

        rep = signaling.elbo_objective(log_px, inst["sender_logits"],
                                       inst["receiver_logits"],
                                       inst["prior_logits"], beta=0.7)
        reports.append(_leq("signaling-regrouping", h, "abs_gap",
                            abs(rep.total - rep.total_kl_form), REGROUP_TOL))

        if i % 4 == 0:
            for beta in (0.0, 0.7):
                prior = None if beta == 0.0 else inst["prior_logits"]
                gs, gr, gp, _ = signaling.objective_gradients(
                    log_px, inst["sender_logits"], inst["receiver_logits"],
                    prior, beta)
                worst = max(
                    np.abs(gs - _central_diff(
                        lambda a: _signaling_value(
                            log_px, a, inst["receiver_logits"], prior, beta),
                        inst["sender_logits"])).max(),
                    np.abs(gr - _central_diff(
                        lambda a: _signaling_value(
                            log_px, inst["sender_logits"], a, prior, beta),
                        inst["receiver_logits"])).max())
                if gp is not None:
                    worst = max(worst, np.abs(gp - _central_diff(
                        lambda a: _signaling_value(
                            log_px, inst["sender_logits"],
                            inst["receiver_logits"], a, beta),
                        prior)).max())
                reports.append(_leq("signaling-gradient", h,
                                    "max_component_gap_beta_%g" % beta,
                                    worst, GRAD_TOL))
    return reports


def achievability_battery(seed: int = 4) -> list:
    """Gradient ascent reaches near-perfect reconstruction at |X| = |M| = 4.

    Uniform source; best of ACHIEVE_RESTARTS random starts after
    ACHIEVE_ITERS steps at ACHIEVE_LR must push the reconstruction objective
    above -ACHIEVE_TOL.
    """
    best = -np.inf
    for r in range(ACHIEVE_RESTARTS):
        rng = np.random.default_rng(seed * 1000 + r)
        inst = signaling.random_instance(rng, 4, 4, scale=0.5,
                                         uniform_source=True)
        res = signaling.optimize(inst["log_px"], inst["sender_logits"],
                                 inst["receiver_logits"], beta=0.0,
                                 lr=ACHIEVE_LR, n_iters=ACHIEVE_ITERS,
                                 train=("sender", "receiver"))
        best = max(best, signaling.reconstruction_objective(
            inst["log_px"], res.sender_logits, res.receiver_logits))
    h = instance_hash({"battery": "achievability", "seed": seed,
                       "restarts": ACHIEVE_RESTARTS, "lr": ACHIEVE_LR,
                       "iters": ACHIEVE_ITERS})
    return [_leq("signaling-achievability", h, "objective_shortfall", -best,
                 ACHIEVE_TOL)]


# ---------------------------------------------------------------------------
# Planning as inference.


def _soft_values_by_enumeration(agent: marl.AgentMdp, messages: np.ndarray,
                                terminal: np.ndarray) -> np.ndarray:
    """Soft values of a deterministic-transition agent by brute force.

    For every start time and state, logsumexp over all action sequences of
    the accumulated reward plus terminal value, minus the uniform-policy
    normalizer.  Requires one-hot transition rows.
    """
    t_len = messages.shape[0]
    a_n = agent.n_actions
    out = np.empty((t_len + 1, agent.n_states))
    out[t_len] = terminal
    for t0 in range(t_len):
        depth = t_len - t0
        for z in range(agent.n_states):
            totals = []
            for seq in itertools.product(range(a_n), repeat=depth):
                cur, total = z, 0.0
                for off, a in enumerate(seq):
                    row = agent.transitions[cur, a, messages[t0 + off]]
                    if row.max() != 1.0:
                        raise ValueError("enumeration needs one-hot rows")
                    total += agent.step_reward[cur, a]
                    cur = int(np.argmax(row))
                totals.append(total + terminal[cur])
            out[t0, z] = logsumexp(totals) - depth * np.log(a_n)
    return out


def _random_agent_mdp(rng, n_states: int, n_actions: int, n_messages: int,
                      deterministic: bool) -> marl.AgentMdp:
    if deterministic:
        trans = np.zeros((n_states, n_actions, n_messages, n_states))
        for z in range(n_states):
            for a in range(n_actions):
                for m in range(n_messages):
                    trans[z, a, m, rng.integers(0, n_states)] = 1.0
    else:
        trans = rng.dirichlet(np.ones(n_states),
                              size=(n_states, n_actions, n_messages))
    reward = rng.normal(size=(n_states, n_actions))
    return marl.AgentMdp(trans, reward, np.full(n_states, 1.0 / n_states))


def cai_battery(seed: int = 5, n_instances: int = 12) -> list:
    """Soft value iteration against enumeration, recursion, and shifts.

    Deterministic instances are checked against the exhaustive
    action-sequence logsumexp; every instance is checked for a vanishing
    Bellman residual under an independent recomputation and for policy
    invariance to a constant reward shift.
    """
    rng = np.random.default_rng(seed)
    reports = []
    for i in range(n_instances):
        s_n, a_n, m_n, t_len = 3, 2, 2, 3
        deterministic = i % 2 == 0
        agent = _random_agent_mdp(rng, s_n, a_n, m_n, deterministic)
        messages = rng.integers(0, m_n, size=t_len)
        terminal = rng.normal(size=s_n)
        log_pol, values = marl.soft_value_iteration(agent, messages, terminal)
        h = instance_hash({"battery": "cai", "i": i,
                           "trans": agent.transitions,
                           "reward": agent.step_reward,
                           "messages": messages, "terminal": terminal})

        if deterministic:
            enum = _soft_values_by_enumeration(agent, messages, terminal)
            reports.append(_leq("cai-enumeration", h, "max_abs_gap",
                                np.abs(values - enum).max(), CAI_TOL))

        resid = 0.0
        log_a = np.log(a_n)
        for t in range(t_len):
            tr = agent.transitions[:, :, messages[t], :]
            q = agent.step_reward + np.einsum("zas,s->za", tr, values[t + 1])
            lse = np.array([logsumexp(row) for row in q])
            resid = max(resid,
                        float(np.abs(values[t] - (lse - log_a)).max()),
                        float(np.abs(log_pol[t] - (q - lse[:, None])).max()))
        reports.append(_leq("cai-bellman", h, "max_residual", resid, CAI_TOL))

        shift = 0.37
        shifted = marl.AgentMdp(agent.transitions,
                                agent.step_reward + shift, agent.start_dist)
        lp2, v2 = marl.soft_value_iteration(shifted, messages, terminal)
        gap = float(np.abs(lp2 - log_pol).max())
        for t in range(t_len + 1):
            want = values[t] + (t_len - t) * shift
            gap = max(gap, float(np.abs(v2[t] - want).max()))
        reports.append(_leq("cai-reward-shift", h, "max_abs_gap", gap,
                            CAI_TOL))
    return reports


def marl_message_battery(seed: int = 6, n_instances: int = 8,
                         horizon: int = 3) -> list:
    """Per-timestep message kernels on frozen rollouts of random MDP pairs.

    The kernel built from the simulator's proposal and acceptance must have
    the enumerated target, prior times both realized transition likelihoods,
    as its detailed-balance fixed point at every timestep.
    """
    rng = np.random.default_rng(seed)
    reports = []
    for i in range(n_instances):
        m_n = (2, 3)[i % 2]
        s_n, a_n = 3, 2
        agents = [_random_agent_mdp(rng, s_n, a_n, m_n, False)
                  for _ in range(2)]
        prior = LogDist.from_probs(rng.dirichlet(np.full(m_n, 5.0)))
        mdp = marl.MessageMdp(agents, horizon, np.zeros((s_n, s_n)), prior)
        messages = rng.integers(0, m_n, size=horizon)
        policies = [marl.soft_value_iteration(a, messages, np.zeros(s_n))[0]
                    for a in agents]
        starts = [int(rng.integers(0, s_n)) for _ in range(2)]
        roll = marl.plan_and_act(mdp, policies, messages, starts,
                                 RandomSource(seed, (i,)))
        adapters = [marl.TrajectoryMessageAgent(a, roll.states[k],
                                                roll.actions[k])
                    for k, a in enumerate(agents)]
        for t in range(horizon):
            sp, li = adapters[t % 2], adapters[1 - t % 2]
            target = np.exp(log_normalize(prior.values
                                          + sp.sign_loglik_vector(t)
                                          + li.sign_loglik_vector(t)))
            kern = verify.build_exchange_kernel(sp, li, t, prior)
            h = instance_hash({"battery": "marl-kernel", "i": i, "t": t,
                               "states": roll.states, "actions": roll.actions,
                               "prior": prior.values})
            reports.append(_leq("marl-kernel-stationary", h, "tv",
                                _tv(verify.stationary_distribution(kern),
                                    target), KERNEL_TOL))
            reports.append(_leq("marl-kernel-balance", h, "max_flow_gap",
                                verify.check_detailed_balance(kern, target),
                                KERNEL_TOL))
    return reports


# ---------------------------------------------------------------------------
# Collapsed-Gibbs perception.


def collapsed_latent_log_post(obs, signs, latents, m_size: int, c_size: int,
                              alpha_phi: float = pgm.DEFAULT_ALPHA_PHI,
                              alpha_theta: float = pgm.DEFAULT_ALPHA_THETA
                              ) -> float:
    """Exact collapsed log posterior of a full latent assignment.

    Polya products over the sign-category and category-feature count tables
    rebuilt from the assignment; the normalizer over assignments is constant
    and omitted.
    """
    obs = np.asarray(obs, dtype=np.int64)
    phi, theta = pgm.rebuild_counts(obs, np.asarray(signs),
                                    np.asarray(latents), m_size, c_size)
    lp = 0.0
    for row in phi:
        lp += gammaln(c_size * alpha_phi) - gammaln(c_size * alpha_phi
                                                    + row.sum())
        lp += float(np.sum(gammaln(alpha_phi + row) - gammaln(alpha_phi)))
    for row in theta:
        lp += gammaln(obs.shape[1] * alpha_theta) - gammaln(
            obs.shape[1] * alpha_theta + row.sum())
        lp += float(np.sum(gammaln(alpha_theta + row) - gammaln(alpha_theta)))
    return lp


def _learning_state(obs, signs, latents, m_size: int, c_size: int):
    phi, theta = pgm.rebuild_counts(obs, signs, latents, m_size, c_size)
    model = pgm.AgentModel(m_size, c_size, obs.shape[1], phi_counts=phi,
                           theta_counts=theta)
    return ng.LearningAgentState(model, obs, signs.copy(), latents.copy())


def scan_gibbs_kernel(obs, signs, m_size: int, c_size: int):
    """Systematic-scan perception kernel assembled from engine conditionals.

    Sweeps objects in order; each factor resamples one category from
    LearningAgentState.latent_logdist, so the product inherits any defect of
    the engine's leave-one-out predictives.
    """
    obs = np.asarray(obs, dtype=np.int64)
    signs = np.asarray(signs, dtype=np.int64)
    d_count = obs.shape[0]
    states = list(itertools.product(range(c_size), repeat=d_count))
    index = {s: i for i, s in enumerate(states)}
    t = np.eye(len(states))
    for d in range(d_count):
        td = np.zeros((len(states), len(states)))
        for s in states:
            agent = _learning_state(obs, signs, np.array(s, dtype=np.int64),
                                    m_size, c_size)
            cond = np.exp(agent.latent_logdist(d))
            for z in range(c_size):
                nxt = list(s)
                nxt[d] = z
                td[index[s], index[tuple(nxt)]] += cond[z]
        t = t @ td
    return t, states


def gibbs_battery(seed: int = 7, n_instances: int = 4) -> list:
    """Scan-Gibbs perception leaves the collapsed posterior invariant."""
    rng = np.random.default_rng(seed)
    reports = []
    for i in range(n_instances):
        obs = rng.integers(0, 4, size=(3, 2))
        obs[:, 0] += 1
        signs = rng.integers(0, 2, size=3)
        m_size = c_size = 2
        t, states = scan_gibbs_kernel(obs, signs, m_size, c_size)
        raw = np.array([collapsed_latent_log_post(obs, signs, s, m_size,
                                                  c_size) for s in states])
        target = np.exp(raw - logsumexp(raw))
        h = instance_hash({"battery": "gibbs", "i": i, "obs": obs,
                           "signs": signs})
        reports.append(_leq("perception-fixed-point", h, "max_abs_gap",
                            float(np.abs(target @ t - target).max()),
                            GIBBS_TOL))
        reports.append(_leq("perception-stationary", h, "tv",
                            _tv(verify.stationary_distribution(t), target),
                            GIBBS_TOL))
    return reports


# ---------------------------------------------------------------------------
# Temporal chains.


def _random_temporal_model(rng, c_size: int, m_size: int,
                           n_features: int) -> temporal.TemporalAgentModel:
    log_init = np.log(rng.dirichlet(np.ones(c_size)))
    log_trans = np.log(rng.dirichlet(np.ones(c_size),
                                     size=(c_size, m_size)))
    emission = pgm.AgentModel(m_size, c_size, n_features,
                              theta_counts=rng.integers(0, 5,
                                                        (c_size, n_features)))
    return temporal.TemporalAgentModel(log_init, log_trans, emission)


def temporal_battery(seed: int = 8, n_instances: int = 6) -> list:
    """Forward filtering versus path enumeration, plus collapsed kernels.

    The filter log-likelihood must match the brute-force sum over latent
    paths for every sign, and the sequence exchange kernel must have the
    collapsed target, prior times both marginal sequence likelihoods, as
    its detailed-balance fixed point.
    """
    rng = np.random.default_rng(seed)
    reports = []
    for i in range(n_instances):
        c_size = (2, 3)[i % 2]
        m_size = (2, 3)[(i // 2) % 2]
        t_len = (2, 3)[i % 2]
        n_features = 3
        models = [_random_temporal_model(rng, c_size, m_size, n_features)
                  for _ in range(2)]
        seqs = [rng.integers(0, 4, size=(t_len, n_features))
                for _ in range(2)]
        prior = LogDist.from_probs(rng.dirichlet(np.full(m_size, 5.0)))
        h = instance_hash({"battery": "temporal", "i": i,
                           "seqs": seqs, "prior": prior.values})

        gap = 0.0
        for model, xs in zip(models, seqs):
            direct = temporal.sequence_loglik_vector(model, xs)
            enum = np.array([temporal.enumerate_sequence_loglik(model, xs, m)
                             for m in range(m_size)])
            gap = max(gap, float(np.abs(direct - enum).max()))
        reports.append(_leq("temporal-filter", h, "max_abs_gap", gap,
                            TEMPORAL_TOL))

        states = [temporal.TemporalAgentState(model, [xs],
                                              np.zeros(1, dtype=np.int64))
                  for model, xs in zip(models, seqs)]
        target = np.exp(log_normalize(prior.values
                                      + states[0].sign_loglik_vector(0)
                                      + states[1].sign_loglik_vector(0)))
        kern = verify.build_exchange_kernel(states[0], states[1], 0, prior)
        reports.append(_leq("temporal-kernel-stationary", h, "tv",
                            _tv(verify.stationary_distribution(kern), target),
                            KERNEL_TOL))
        reports.append(_leq("temporal-kernel-balance", h, "max_flow_gap",
                            verify.check_detailed_balance(kern, target),
                            KERNEL_TOL))
    return reports


# ---------------------------------------------------------------------------
# Aggregation and mutation sensitivity.


def run_battery(seed: int = 0) -> list:
    """Every oracle battery in a fixed order; deterministic given seed."""
    reports = []
    reports += naming_kernel_battery(seed)
    reports += kl_battery(seed + 1)
    reports += cfe_battery(seed + 2)
    reports += signaling_battery(seed + 3)
    reports += achievability_battery(seed + 4)
    reports += cai_battery(seed + 5)
    reports += marl_message_battery(seed + 6)
    reports += gibbs_battery(seed + 7)
    reports += temporal_battery(seed + 8)
    return reports


def battery_passed(reports) -> bool:
    return all(r.passed for r in reports)


def _worst_kernel_gap(instances) -> tuple:
    db = tv = 0.0
    for inst in instances:
        states = verify.frozen_instance_states(inst)
        target = verify.sign_target_given_latents(
            inst["log_pz"], inst["latents"][:, 0], inst["prior"])
        kern = verify.build_exchange_kernel(states[0], states[1], 0,
                                            inst["prior"])
        db = max(db, verify.check_detailed_balance(kern, target))
        tv = max(tv, _tv(verify.stationary_distribution(kern),
                         target.probs()))
    return db, tv


def mutation_battery(seed: int = 0) -> list:
    """Install each seeded protocol bug, measure, and restore.

    A report passes when the oracle's measured deviation exceeds its
    detection floor, i.e. when the corresponding defect would be caught.
    """
    rng = np.random.default_rng(seed)
    instances = [verify.random_frozen_instance(rng, m_size=3, c_size=2)
                 for _ in range(3)]
    h = instance_hash({"battery": "mutation", "seed": seed,
                       "priors": [inst["prior"].values
                                  for inst in instances]})
    reports = []

    orig_accept = ng.mh_accept_log_gamma

    def squared_accept(listener_factor, proposed, current):
        return 2.0 * orig_accept(listener_factor, proposed, current)

    ng.mh_accept_log_gamma = squared_accept
    try:
        db, tv = _worst_kernel_gap(instances)
    finally:
        ng.mh_accept_log_gamma = orig_accept
    reports.append(_detect("mutation-squared-acceptance", h, "max_flow_gap",
                           db, MUTATION_DB_FLOOR))
    reports.append(_detect("mutation-squared-acceptance", h, "tv", tv,
                           MUTATION_TV_FLOOR))

    orig_proposal = ng.sign_proposal_dist

    def uniform_proposal(speaker, d, prior):
        return log_normalize(np.zeros(len(prior)))

    ng.sign_proposal_dist = uniform_proposal
    try:
        _, tv = _worst_kernel_gap(instances)
    finally:
        ng.sign_proposal_dist = orig_proposal
    reports.append(_detect("mutation-uniform-proposal", h, "tv", tv,
                           MUTATION_TV_FLOOR))

    orig_logdist = ng.LearningAgentState.latent_logdist

    def no_leave_one_out(self, d):
        return pgm.posterior_latent(self.model, self.obs[d],
                                    int(self.signs[d])).values

    ng.LearningAgentState.latent_logdist = no_leave_one_out
    try:
        worst = 0.0
        gib_rng = np.random.default_rng(seed + 1)
        for _ in range(3):
            obs = gib_rng.integers(0, 4, size=(3, 2))
            obs[:, 0] += 1
            signs = gib_rng.integers(0, 2, size=3)
            t, states = scan_gibbs_kernel(obs, signs, 2, 2)
            raw = np.array([collapsed_latent_log_post(obs, signs, s, 2, 2)
                            for s in states])
            target = np.exp(raw - logsumexp(raw))
            worst = max(worst, _tv(verify.stationary_distribution(t), target))
    finally:
        ng.LearningAgentState.latent_logdist = orig_logdist
    reports.append(_detect("mutation-missing-leave-one-out", h, "tv", worst,
                           MUTATION_GIBBS_FLOOR))
    return reports
