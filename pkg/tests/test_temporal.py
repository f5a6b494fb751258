import numpy as np
import pytest

from emcom import naming_game as ng
from emcom import pgm, temporal, verify
from emcom.probcore import (
    ConfigError,
    ContractError,
    LogDist,
    RandomSource,
    SizeCapError,
    log_normalize,
    logsumexp,
)


def random_model(seed, c=3, m=3, f=4):
    rng = np.random.default_rng(seed)
    em = pgm.AgentModel(m, c, f,
                        phi_counts=rng.integers(0, 5, (m, c)),
                        theta_counts=rng.integers(0, 6, (c, f)))
    return temporal.TemporalAgentModel.from_counts(
        rng.integers(0, 4, c), rng.integers(0, 4, (c, m, c)), em)


def random_sequence(seed, t=3, f=4):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 3, (t, f)) + 1


# ---------------------------------------------------------------------------
# Model construction.


def test_model_validation():
    model = random_model(0)
    with pytest.raises(ContractError):
        temporal.TemporalAgentModel(model.log_init[:-1], model.log_trans,
                                    model.emission)
    with pytest.raises(ContractError):
        temporal.TemporalAgentModel(model.log_init + 0.3, model.log_trans,
                                    model.emission)
    with pytest.raises(ContractError):
        temporal.TemporalAgentModel(model.log_init, model.log_trans + 0.1,
                                    model.emission)
    with pytest.raises(ContractError):
        temporal.TemporalAgentModel(model.log_init, model.log_trans[:, :, :2],
                                    model.emission)
    with pytest.raises(ContractError):
        temporal.TemporalAgentModel.from_counts(
            np.ones(3), np.ones((3, 3, 3)), model.emission, alpha_init=0.0)


def test_from_counts_is_dirichlet_predictive():
    rng = np.random.default_rng(1)
    em = pgm.AgentModel(2, 3, 4)
    init = rng.integers(0, 7, 3)
    trans = rng.integers(0, 7, (3, 2, 3))
    model = temporal.TemporalAgentModel.from_counts(init, trans, em,
                                                    alpha_init=0.5,
                                                    alpha_trans=2.0)
    want_init = (init + 0.5) / (init + 0.5).sum()
    np.testing.assert_allclose(np.exp(model.log_init), want_init, atol=1e-12)
    pseudo = trans + 2.0
    want_trans = pseudo / pseudo.sum(axis=2, keepdims=True)
    np.testing.assert_allclose(np.exp(model.log_trans), want_trans,
                               atol=1e-12)


# ---------------------------------------------------------------------------
# Forward filter against the path-enumeration oracle.


def test_forward_filter_matches_path_enumeration():
    for seed in range(8):
        c = 2 + seed % 2
        model = random_model(seed, c=c)
        xs = random_sequence(seed + 50, t=1 + seed % 3)
        for m in range(model.n_signs):
            got = temporal.forward_filter(model, xs, m).loglik
            want = temporal.enumerate_sequence_loglik(model, xs, m)
            assert got == pytest.approx(want, abs=1e-10)


def test_forward_filter_posteriors_normalized():
    model = random_model(3)
    res = temporal.forward_filter(model, random_sequence(9), 1)
    np.testing.assert_allclose(np.exp(res.filtered).sum(axis=1), 1.0,
                               atol=1e-12)


def test_forward_filter_t1_reduces_to_static_posterior():
    # With every transition row equal to the static sign-conditional
    # p(z | m, phi), the chain prior for the first step is that table row
    # and the filtered posterior must match the static one.
    rng = np.random.default_rng(4)
    em = pgm.AgentModel(3, 3, 4,
                        phi_counts=rng.integers(0, 6, (3, 3)),
                        theta_counts=rng.integers(0, 6, (3, 4)))
    static_rows = pgm.latent_table(em)
    trans = np.repeat(static_rows[None, :, :], 3, axis=0)
    model = temporal.TemporalAgentModel(log_normalize(rng.normal(size=3)),
                                        trans, em)
    x = rng.integers(1, 4, 4)
    for m in range(3):
        res = temporal.forward_filter(model, x[None, :], m)
        want = pgm.posterior_latent(em, x, m)
        np.testing.assert_allclose(res.filtered[0], want.values, atol=1e-10)


def test_uninformative_emissions_give_chain_marginals():
    rng = np.random.default_rng(5)
    em = pgm.AgentModel(2, 3, 4,
                        theta_counts=np.tile(rng.integers(0, 5, 4), (3, 1)))
    model = temporal.TemporalAgentModel.from_counts(
        rng.integers(0, 4, 3), rng.integers(0, 4, (3, 2, 3)), em)
    xs = random_sequence(11, t=4)
    res = temporal.forward_filter(model, xs, 1)
    step = np.exp(model.log_trans[:, 1, :])
    mu = np.exp(model.log_init)
    for t in range(4):
        mu = mu @ step
        np.testing.assert_allclose(np.exp(res.filtered[t]), mu, atol=1e-12)


def test_enumeration_cap():
    model = random_model(6, c=3)
    with pytest.raises(SizeCapError):
        temporal.enumerate_sequence_loglik(model, random_sequence(1, t=3),
                                           0, cap=10)


def test_sequence_loglik_vector_stacks_per_sign():
    model = random_model(7)
    xs = random_sequence(12)
    vec = temporal.sequence_loglik_vector(model, xs)
    assert vec.shape == (model.n_signs,)
    for m in range(model.n_signs):
        assert vec[m] == pytest.approx(
            temporal.forward_filter(model, xs, m).loglik, abs=1e-12)


# ---------------------------------------------------------------------------
# Posterior path sampling.


def enumerate_path_posterior(model, xs, m):
    """Exact posterior over z_{0:T} paths; returns (paths, probs)."""
    log_b = temporal.emission_loglik_matrix(model, xs)
    t_len = log_b.shape[0]
    c = model.n_categories
    step = model.log_trans[:, m, :]
    paths, scores = [], []
    for path in np.ndindex(*([c] * (t_len + 1))):
        lp = model.log_init[path[0]]
        for t in range(t_len):
            lp += step[path[t], path[t + 1]] + log_b[t, path[t + 1]]
        paths.append(path)
        scores.append(lp)
    probs = np.exp(log_normalize(np.array(scores)))
    return paths, probs


def test_sample_posterior_path_matches_enumeration():
    model = random_model(8, c=2)
    xs = random_sequence(13, t=2)
    paths, probs = enumerate_path_posterior(model, xs, 1)
    index = {p: i for i, p in enumerate(paths)}
    rng = RandomSource(71)
    freq = np.zeros(len(paths))
    n = 6000
    for _ in range(n):
        draw = tuple(temporal.sample_posterior_path(model, xs, 1, rng))
        freq[index[draw]] += 1
    assert 0.5 * np.abs(freq / n - probs).sum() < 0.03


def test_path_loglik_vector_manual_sum():
    model = random_model(9)
    path = np.array([2, 0, 1, 1])
    vec = temporal.path_loglik_vector(model, path)
    for m in range(model.n_signs):
        want = model.log_init[2] + model.log_trans[2, m, 0] \
            + model.log_trans[0, m, 1] + model.log_trans[1, m, 1]
        assert vec[m] == pytest.approx(want, abs=1e-12)


# ---------------------------------------------------------------------------
# Exchange rounds and kernels.


def make_states(seed, collapsed=True, d=2, t=3):
    model_a = random_model(seed)
    model_b = random_model(seed + 100)
    seqs_a = [random_sequence(seed + 10 + i, t=t) for i in range(d)]
    seqs_b = [random_sequence(seed + 20 + i, t=t) for i in range(d)]
    rng = None if collapsed else RandomSource(seed + 5)
    return [temporal.TemporalAgentState(model_a, seqs_a, [0] * d, collapsed,
                                        rng),
            temporal.TemporalAgentState(model_b, seqs_b, [0] * d, collapsed,
                                        rng)]


def test_collapsed_kernel_matches_product_target():
    for seed in range(6):
        states = make_states(seed)
        prior = LogDist.from_probs(
            np.random.default_rng(seed).dirichlet(np.full(3, 4.0)))
        for d in range(2):
            kernel = verify.build_exchange_kernel(states[0], states[1], d,
                                                  prior)
            target = np.exp(log_normalize(
                prior.values + states[0].sign_loglik_vector(d)
                + states[1].sign_loglik_vector(d)))
            pi = verify.stationary_distribution(kernel)
            assert 0.5 * np.abs(pi - target).sum() < 1e-10
            assert verify.check_detailed_balance(kernel, target) < 1e-10


def test_collapsed_target_is_marginal_likelihood_product():
    states = make_states(3)
    d = 1
    want = [temporal.forward_filter(states[0].model, states[0].sequences[d],
                                    m).loglik
            + temporal.forward_filter(states[1].model, states[1].sequences[d],
                                      m).loglik
            for m in range(3)]
    got = states[0].sign_loglik_vector(d) + states[1].sign_loglik_vector(d)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_frozen_path_kernel_matches_path_target():
    model_a, model_b = random_model(30), random_model(31)
    xs_a, xs_b = random_sequence(40), random_sequence(41)
    rng = RandomSource(9)
    path_a = temporal.sample_posterior_path(model_a, xs_a, 0, rng)
    path_b = temporal.sample_posterior_path(model_b, xs_b, 0, rng)
    states = [temporal.FrozenPathState(model_a, [xs_a], [0], [path_a]),
              temporal.FrozenPathState(model_b, [xs_b], [0], [path_b])]
    prior = LogDist.uniform(3)
    kernel = verify.build_cycle_kernel(states[0], states[1], 0, prior)
    target = np.exp(log_normalize(
        prior.values + temporal.path_loglik_vector(model_a, path_a)
        + temporal.path_loglik_vector(model_b, path_b)))
    pi = verify.stationary_distribution(kernel)
    assert 0.5 * np.abs(pi - target).sum() < 1e-10


def test_round_trace_and_m1_fixed_point():
    states = make_states(4)
    events = temporal.temporal_naming_game_round(states, LogDist.uniform(3),
                                                 RandomSource(17))
    assert len(events) == 4
    for ev in events:
        assert set(ev) == {"speaker", "listener", "object", "listener_sign",
                           "proposed", "gamma", "u", "accepted"}
        assert 0.0 <= ev["gamma"] <= 1.0
    # single-sign vocabulary: proposals equal the current sign, gamma = 1
    model = random_model(5, m=1)
    solo = [temporal.TemporalAgentState(model, [random_sequence(2)], [0]),
            temporal.TemporalAgentState(model, [random_sequence(3)], [0])]
    evs = temporal.temporal_naming_game_round(solo, LogDist.uniform(1),
                                              RandomSource(3))
    assert all(ev["gamma"] == 1.0 and ev["proposed"] == 0 for ev in evs)
    assert solo[0].signs.tolist() == [0] and solo[1].signs.tolist() == [0]


def test_round_is_deterministic_given_stream():
    a = make_states(6, collapsed=False)
    b = make_states(6, collapsed=False)
    ev_a = temporal.temporal_naming_game_round(a, LogDist.uniform(3),
                                               RandomSource(23))
    ev_b = temporal.temporal_naming_game_round(b, LogDist.uniform(3),
                                               RandomSource(23))
    assert ev_a == ev_b
    np.testing.assert_array_equal(a[0].signs, b[0].signs)
    np.testing.assert_array_equal(a[1].signs, b[1].signs)


def test_sampled_path_state_contracts():
    model = random_model(10)
    with pytest.raises(ConfigError):
        temporal.TemporalAgentState(model, [random_sequence(1)], [0],
                                    collapsed=False)
    state = temporal.TemporalAgentState(model, [random_sequence(1)], [0],
                                        collapsed=False, rng=RandomSource(1))
    with pytest.raises(ContractError):
        state.sign_loglik_vector(0)


def test_level_a_reduction_matches_static_acceptance():
    # T=1 with all transition rows equal to the static p(z | m, phi): the
    # path factor for a pinned category equals the static agent's factor,
    # so acceptance probabilities coincide for every (proposed, current).
    rng = np.random.default_rng(14)
    em = pgm.AgentModel(3, 3, 4,
                        phi_counts=rng.integers(0, 6, (3, 3)),
                        theta_counts=rng.integers(0, 6, (3, 4)))
    static_rows = pgm.latent_table(em)
    trans = np.repeat(static_rows[None, :, :], 3, axis=0)
    model = temporal.TemporalAgentModel(log_normalize(rng.normal(size=3)),
                                        trans, em)
    x = rng.integers(1, 4, 4)
    for z in range(3):
        frozen = ng.FrozenAgentState(static_rows, np.array([z]),
                                     np.zeros(1, dtype=np.int64))
        path_state = temporal.FrozenPathState(model, [x[None, :]], [0],
                                              [np.array([0, z])])
        for prop in range(3):
            for cur in range(3):
                want = ng.acceptance_probability(frozen, 0, prop, cur)
                got = float(np.exp(ng.mh_accept_log_gamma(
                    path_state.sign_loglik_vector(0), prop, cur)))
                assert got == pytest.approx(want, abs=1e-12)


# ---------------------------------------------------------------------------
# Sequence datasets.


def test_sequence_dataset_validation_and_roundtrip(tmp_path):
    counts = np.ones((2, 3, 4, 5), dtype=np.int64)
    ds = temporal.SequenceDataset(counts, np.array([0, 1, 0]))
    path = tmp_path / "seq.json"
    ds.save(path)
    back = temporal.SequenceDataset.load(path)
    np.testing.assert_array_equal(back.counts, ds.counts)
    np.testing.assert_array_equal(back.labels, ds.labels)
    with pytest.raises(ContractError):
        temporal.SequenceDataset(np.ones((2, 3, 4)))
    with pytest.raises(ContractError):
        temporal.SequenceDataset(np.zeros((2, 3, 4, 5), dtype=np.int64))
    with pytest.raises(ContractError):
        temporal.SequenceDataset(counts, np.array([0, 1]))
