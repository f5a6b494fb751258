import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from emcom import naming_game as ng
from emcom import pgm, verify
from emcom.probcore import (
    ContractError,
    LogDist,
    PropertyViolation,
    RandomSource,
    SizeCapError,
    total_variation,
)


def instance_states(seed, m=2, c=2):
    rng = RandomSource(seed)
    inst = verify.random_frozen_instance(rng, m_size=m, c_size=c)
    states = verify.frozen_instance_states(inst)
    return inst, states


# ---------------------------------------------------------------------------
# Kernels.


def test_exchange_kernel_rows_stochastic():
    inst, states = instance_states(0, m=3)
    k = verify.build_exchange_kernel(states[0], states[1], 0, inst["prior"])
    np.testing.assert_allclose(k.matrix.sum(axis=1), 1.0, atol=1e-12)


def test_kernel_fixed_point_and_detailed_balance_battery():
    checked = 0
    for m in (2, 3, 4):
        for c in (2, 3):
            for rep in range(3):
                inst, states = instance_states(100 * m + 10 * c + rep, m, c)
                target = verify.sign_target_given_latents(
                    inst["log_pz"], inst["latents"][:, 0], inst["prior"])
                single = verify.build_exchange_kernel(states[0], states[1], 0,
                                                      inst["prior"])
                cycle = verify.build_cycle_kernel(states[0], states[1], 0,
                                                  inst["prior"])
                for kern in (single, cycle):
                    pi = verify.stationary_distribution(kern)
                    assert total_variation(np.log(pi), target.values) < 1e-10
                assert verify.check_detailed_balance(single, target) < 1e-10
                checked += 1
    assert checked == 18


def test_cycle_kernel_is_product_of_exchanges():
    inst, states = instance_states(5, m=3)
    ab = verify.build_exchange_kernel(states[0], states[1], 0, inst["prior"]).matrix
    ba = verify.build_exchange_kernel(states[1], states[0], 0, inst["prior"]).matrix
    cyc = verify.build_cycle_kernel(states[0], states[1], 0, inst["prior"]).matrix
    np.testing.assert_allclose(cyc, ab @ ba, atol=1e-15)


def test_kernel_single_sign_is_identity():
    inst, states = instance_states(6, m=1)
    k = verify.build_exchange_kernel(states[0], states[1], 0, inst["prior"])
    np.testing.assert_allclose(k.matrix, [[1.0]], atol=1e-15)


def test_kernel_matrix_validation():
    with pytest.raises(ContractError):
        verify.KernelMatrix(np.array([[0.5, 0.2], [0.5, 0.5]]), {})


def test_stationary_cross_check_tolerance():
    # A kernel with a known closed-form fixed point.
    t = np.array([[0.9, 0.1], [0.3, 0.7]])
    pi = verify.stationary_distribution(t)
    np.testing.assert_allclose(pi, [0.75, 0.25], atol=1e-12)


# ---------------------------------------------------------------------------
# KL trajectory.


def test_kl_trajectory_monotone_and_terminal():
    inst, states = instance_states(7, m=3)
    target = verify.sign_target_given_latents(inst["log_pz"],
                                              inst["latents"][:, 0],
                                              inst["prior"])
    kern = verify.build_cycle_kernel(states[0], states[1], 0, inst["prior"])
    rng = RandomSource(11)
    for _ in range(10):
        start = rng.dirichlet(np.ones(3))
        values = verify.kl_trajectory(kern, target, start, 40)
        assert len(values) == 41
        assert values[-1] < 1e-8
        for a, b in zip(values, values[1:]):
            assert b <= a + 1e-12


def test_kl_trajectory_at_target_stays_zero():
    inst, states = instance_states(8, m=2)
    target = verify.sign_target_given_latents(inst["log_pz"],
                                              inst["latents"][:, 0],
                                              inst["prior"])
    kern = verify.build_exchange_kernel(states[0], states[1], 0, inst["prior"])
    values = verify.kl_trajectory(kern, target, target.probs(), 10)
    assert max(values) < 1e-12


def test_kl_trajectory_flags_increase_for_wrong_target():
    inst, states = instance_states(9, m=3)
    kern = verify.build_exchange_kernel(states[0], states[1], 0, inst["prior"])
    wrong = LogDist.from_probs([0.997, 0.002, 0.001])
    start = verify.stationary_distribution(kern)  # KL to wrong target grows
    with pytest.raises(PropertyViolation):
        verify.kl_trajectory(kern, wrong, np.array([0.8, 0.1, 0.1]), 60)
    # sanity: with tol disabled the values are produced
    vals = verify.kl_trajectory(kern, wrong, np.array([0.8, 0.1, 0.1]), 60,
                                tol=None)
    assert len(vals) == 61


# ---------------------------------------------------------------------------
# Enumeration.


def test_enumerate_posterior_self_consistency():
    rng = np.random.default_rng(0)
    agents = [pgm.AgentModel(2, 2, 3,
                             phi_counts=rng.integers(0, 3, (2, 2)),
                             theta_counts=rng.integers(0, 3, (2, 3)))
              for _ in range(2)]
    counts = rng.integers(1, 4, size=(2, 2, 3))
    dataset = pgm.Dataset(counts)
    prior = pgm.uniform_sign_prior(2)
    signs_post = verify.enumerate_posterior(dataset, agents, prior)
    joint = verify.enumerate_posterior(dataset, agents, prior,
                                       marginalize_latents=False)
    marg = {}
    for atom, lp in zip(joint.support, joint.log_probs):
        key = tuple(atom.signs)
        marg[key] = np.logaddexp(marg.get(key, -np.inf), lp)
    for row, lp in zip(signs_post.support, signs_post.log_probs):
        assert marg[tuple(row)] == pytest.approx(lp, abs=1e-10)


def test_enumerate_posterior_cap_refusal():
    rng = np.random.default_rng(1)
    agents = [pgm.AgentModel(3, 2, 2) for _ in range(2)]
    dataset = pgm.Dataset(rng.integers(1, 3, size=(2, 6, 2)))
    prior = pgm.uniform_sign_prior(3)
    with pytest.raises(SizeCapError):
        verify.enumerate_posterior(dataset, agents, prior, cap=100)


def test_sign_target_matches_enumeration_with_clamped_latents():
    # p(m | z fixed) from the helper equals the normalized slice of the full
    # joint enumeration at those latent values.
    rng = np.random.default_rng(2)
    agents = [pgm.AgentModel(3, 2, 3,
                             phi_counts=rng.integers(0, 4, (3, 2)),
                             theta_counts=rng.integers(0, 4, (2, 3)))
              for _ in range(2)]
    dataset = pgm.Dataset(rng.integers(1, 4, size=(2, 1, 3)))
    prior = LogDist.from_probs(rng.dirichlet(np.ones(3)))
    joint = verify.enumerate_posterior(dataset, agents, prior,
                                       marginalize_latents=False)
    z_fix = (1, 0)
    slice_lp = {m: -np.inf for m in range(3)}
    for atom, lp in zip(joint.support, joint.log_probs):
        if tuple(atom.latents[:, 0]) == z_fix:
            slice_lp[int(atom.signs[0])] = np.logaddexp(
                slice_lp[int(atom.signs[0])], lp)
    arr = np.array([slice_lp[m] for m in range(3)])
    arr -= verify.logsumexp(arr)
    target = verify.sign_target_given_latents(
        [pgm.latent_table(a) for a in agents], z_fix, prior)
    np.testing.assert_allclose(target.values, arr, atol=1e-10)


# ---------------------------------------------------------------------------
# ARI.


def test_ari_identical_partitions():
    assert verify.adjusted_rand_index([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert verify.adjusted_rand_index([0, 0, 1, 1], [5, 5, 2, 2]) == 1.0


def test_ari_singletons_vs_single_cluster():
    assert verify.adjusted_rand_index([0, 1, 2, 3], [0, 0, 0, 0]) == 0.0


def test_ari_matches_sklearn_on_random_labelings():
    rng = np.random.default_rng(3)
    for _ in range(30):
        n = int(rng.integers(2, 40))
        a = rng.integers(0, 4, n)
        b = rng.integers(0, 4, n)
        assert verify.adjusted_rand_index(a, b) == pytest.approx(
            adjusted_rand_score(a, b), abs=1e-12)


def test_ari_input_validation():
    with pytest.raises(ContractError):
        verify.adjusted_rand_index([0, 1], [0, 1, 2])


# ---------------------------------------------------------------------------
# Mutation visibility at the kernel level.


def test_squared_acceptance_ratio_detected(monkeypatch):
    inst, states = instance_states(20, m=3)
    target = verify.sign_target_given_latents(inst["log_pz"],
                                              inst["latents"][:, 0],
                                              inst["prior"])
    orig = ng.mh_accept_log_gamma

    def squared(listener_factor, proposed, current):
        return 2.0 * orig(listener_factor, proposed, current)

    monkeypatch.setattr(ng, "mh_accept_log_gamma", squared)
    kern = verify.build_exchange_kernel(states[0], states[1], 0, inst["prior"])
    assert verify.check_detailed_balance(kern, target) > 1e-3
    pi = verify.stationary_distribution(kern)
    assert total_variation(np.log(pi), target.values) > 1e-4


def test_uniform_proposal_detected(monkeypatch):
    inst, states = instance_states(21, m=3)
    target = verify.sign_target_given_latents(inst["log_pz"],
                                              inst["latents"][:, 0],
                                              inst["prior"])

    def uniform_proposal(speaker, d, prior):
        return np.full(len(prior), -np.log(len(prior)))

    monkeypatch.setattr(ng, "sign_proposal_dist", uniform_proposal)
    kern = verify.build_exchange_kernel(states[0], states[1], 0, inst["prior"])
    pi = verify.stationary_distribution(kern)
    assert total_variation(np.log(pi), target.values) > 1e-4
