import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from fedmerdel.data import CategoricalDataset, DataError
from fedmerdel.errors import ContractError, DomainError, InconsistencyError
from fedmerdel.model import (Priors, assignment_entropy, check_convergence, e_step, e_step_with_entropy,
                             elbo_direct, elbo_from_stats, expected_log_phi, expected_log_pi, m_step,
                             suff_stats)
from toys import random_dataset, random_params


# ---------------------------------------------------------------------------
# data and priors


def test_dataset_rejects_out_of_range_and_unary():
    with pytest.raises(DataError):
        CategoricalDataset(np.array([[0, 2]]), [2, 2])
    with pytest.raises(DataError):
        CategoricalDataset(np.array([[0, 0]]), [2, 1])
    with pytest.raises(DataError):
        CategoricalDataset(np.array([[0, -1]]), [2, 2])


def test_dataset_flattened_index():
    data = CategoricalDataset(np.array([[0, 2], [1, 0]]), [2, 3])
    assert data.n_columns == 5
    np.testing.assert_array_equal(data.idx, [[0, 4], [1, 2]])
    assert not data.is_binary


def test_priors_validation_and_default_epsilon():
    with pytest.raises(DomainError):
        Priors(alpha0=0.0)
    with pytest.raises(DomainError):
        Priors(epsilon=(0.5, 0.0))
    np.testing.assert_allclose(Priors().epsilon_flat([2, 4]), [0.5, 0.5, 0.25, 0.25, 0.25, 0.25])
    with pytest.raises(ContractError):
        Priors(epsilon=(0.5,)).resolve([2, 2])


# ---------------------------------------------------------------------------
# expectations


def test_expected_log_pi_closed_forms():
    np.testing.assert_allclose(expected_log_pi([1.0, 1.0]), [-1.0, -1.0], rtol=0, atol=1e-14)
    np.testing.assert_allclose(expected_log_pi([3.7]), [0.0], atol=1e-15)


def test_expected_log_pi_oracle():
    alpha = [0.01, 3.01, 7.01]
    np.testing.assert_allclose(expected_log_pi(alpha), oracles.e_log_pi(alpha), rtol=1e-13)
    assert np.all(expected_log_pi(alpha) < 0)


def test_expected_log_phi_examples():
    out = expected_log_phi([0.5, 0.5])
    assert out[0] == out[1] == pytest.approx(oracles.digamma(0.5) - oracles.digamma(1.0), abs=1e-14)
    np.testing.assert_allclose(expected_log_phi([2.3]), [0.0], atol=1e-15)
    np.testing.assert_allclose(expected_log_phi([1.5, 2.5, 6.0]), oracles.e_log_phi([1.5, 2.5, 6.0], [3])[0],
                               rtol=1e-13)


def test_expectations_reject_non_positive():
    with pytest.raises(DomainError):
        expected_log_pi([1.0, 0.0])
    with pytest.raises(DomainError):
        expected_log_phi([[1.0, -2.0]])


def test_digamma_against_oracle_on_1000_inputs(rng):
    values = np.exp(rng.uniform(np.log(1e-3), np.log(1e4), size=(250, 4)))
    for row in values:
        np.testing.assert_allclose(expected_log_pi(row), oracles.e_log_pi(list(row)), rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(expected_log_phi(row, [2, 2]), sum(oracles.e_log_phi(list(row), [2, 2]), []),
                                   rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------------------
# E and M steps


def test_e_step_single_cluster(binary_toy):
    resp = e_step(binary_toy, [5.0], np.ones((1, 4)))
    np.testing.assert_array_equal(resp, np.ones((4, 1)))


def test_e_step_identical_clusters_split_evenly(binary_toy):
    eps = np.array([[1.0, 3.0, 2.0, 2.5]] * 2)
    np.testing.assert_allclose(e_step(binary_toy, [2.0, 2.0], eps), 0.5, atol=1e-15)


def test_e_step_scalar_oracle(binary_toy):
    alpha = [2.5, 1.5]
    eps = [[3.0, 1.0, 0.5, 2.0], [0.7, 2.2, 1.9, 0.4]]
    want = oracles.responsibilities(binary_toy.values.tolist(), [2, 2], alpha, eps)
    np.testing.assert_allclose(e_step(binary_toy, alpha, eps), want, rtol=1e-12)


def test_e_step_no_underflow_at_large_p(rng):
    data = random_dataset(rng, 20, [2] * 3000)
    alpha, eps = random_params(rng, 3, data.n_columns)
    eps[0] *= 50
    resp = e_step(data, alpha, eps)
    assert np.all(np.isfinite(resp))
    np.testing.assert_allclose(resp.sum(axis=1), 1.0, atol=1e-12)


def test_m_step_empty_cluster_is_prior_only(binary_toy):
    priors = Priors().resolve(binary_toy.cardinalities)
    resp = np.column_stack([np.ones(4), np.zeros(4)])
    alpha, eps = m_step(binary_toy, resp, priors)
    assert alpha[1] == priors.alpha0
    np.testing.assert_array_equal(eps[1], priors.epsilon_flat(binary_toy.cardinalities))


def test_m_step_hard_assignment_counts(binary_toy):
    priors = Priors().resolve(binary_toy.cardinalities)
    resp = np.array([[1, 0], [1, 0], [0, 1], [1, 0]], dtype=float)
    _, eps = m_step(binary_toy, resp, priors)
    # cluster 0 holds rows 0, 1, 3: var0 = 0,1,1 ; var1 = 1,1,0
    np.testing.assert_allclose(eps[0], 0.5 + np.array([1, 2, 1, 2]))


def test_m_step_scalar_oracle(rng):
    data = random_dataset(rng, 5, [2, 3])
    resp = rng.dirichlet(np.ones(3), size=5)
    priors = Priors().resolve(data.cardinalities)
    alpha, eps = m_step(data, resp, priors)
    want_a, want_e = oracles.m_step(data.values.tolist(), [2, 3], resp.tolist(), 0.01, [0.5, 1 / 3])
    np.testing.assert_allclose(alpha, want_a, rtol=1e-13)
    np.testing.assert_allclose(eps, want_e, rtol=1e-13)


def test_m_step_rejects_bad_shape(binary_toy):
    with pytest.raises(ContractError):
        m_step(binary_toy, np.ones((3, 2)) / 2, Priors())


# ---------------------------------------------------------------------------
# entropy, stats and the ELBO


def test_assignment_entropy_examples(rng):
    assert assignment_entropy(np.eye(3)) == 0.0
    assert assignment_entropy(np.full((2, 2), 0.5)) == pytest.approx(2 * math.log(0.5), abs=1e-15)
    r = rng.dirichlet(np.ones(4), size=7)
    assert assignment_entropy(r) == pytest.approx(sum(v * math.log(v) for v in r.ravel()), rel=1e-13)
    assert assignment_entropy(np.array([[1.0, 1e-320]])) == 0.0


def test_suff_stats_examples(rng):
    priors = Priors().resolve([2, 2])
    eps0 = priors.epsilon_flat([2, 2])
    stats = suff_stats([0.01, 7.01], np.vstack([eps0, eps0 + [3, 4, 7, 0]]), priors, [2, 2])
    np.testing.assert_allclose(stats.T, [0.0, 7.0], atol=1e-12)
    np.testing.assert_allclose(stats.S[0], 0.0)
    with pytest.raises(InconsistencyError):
        suff_stats([0.001], eps0[None, :], priors, [2, 2])


def test_suff_stats_match_responsibility_sums(rng):
    data = random_dataset(rng, 40, [2, 3, 4])
    priors = Priors().resolve(data.cardinalities)
    resp = rng.dirichlet(np.ones(3), size=40)
    alpha, eps = m_step(data, resp, priors)
    stats = suff_stats(alpha, eps, priors, data.cardinalities)
    np.testing.assert_allclose(stats.T, resp.sum(axis=0), rtol=1e-12)
    direct = np.zeros_like(eps)
    for n in range(40):
        for j, c in enumerate(data.idx[n]):
            direct[:, c] += resp[n]
    np.testing.assert_allclose(stats.S, direct, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(stats.S[:, :2].sum(axis=1), stats.T, rtol=1e-12)


def test_elbo_direct_scalar_oracle():
    data = CategoricalDataset(np.array([[0, 1], [1, 1], [0, 0]]), [2, 2])
    priors = Priors().resolve(data.cardinalities)
    resp = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
    alpha, eps = m_step(data, resp, priors)
    got = elbo_direct(data, resp, alpha, eps, priors, 2)
    want = oracles.elbo(data.values.tolist(), [2, 2], resp.tolist(), alpha.tolist(), eps.tolist(), 0.01,
                        [0.5, 0.5], 2)
    assert got == pytest.approx(want, rel=1e-11)


def test_elbo_oracle_with_zombies(rng):
    data = random_dataset(rng, 12, [2, 3])
    priors = Priors().resolve(data.cardinalities)
    resp = rng.dirichlet(np.ones(3), size=12)
    alpha, eps = m_step(data, resp, priors)
    got = elbo_direct(data, resp, alpha, eps, priors, 7)
    want = oracles.elbo(data.values.tolist(), [2, 3], resp.tolist(), alpha.tolist(), eps.tolist(), 0.01,
                        [0.5, 1 / 3], 7)
    assert got == pytest.approx(want, rel=1e-11)


def test_pruning_zombie_keeps_elbo(rng):
    data = random_dataset(rng, 30, [2, 2, 3])
    priors = Priors().resolve(data.cardinalities)
    resp = np.column_stack([rng.dirichlet(np.ones(2), size=30), np.zeros(30)])
    alpha, eps = m_step(data, resp, priors)
    full = elbo_direct(data, resp, alpha, eps, priors, 3)
    pruned = elbo_direct(data, resp[:, :2], alpha[:2], eps[:2], priors, 3)
    assert pruned == pytest.approx(full, rel=1e-8)


def test_elbo_direct_rejects_small_prior_dimension(binary_toy):
    priors = Priors().resolve(binary_toy.cardinalities)
    resp = np.full((4, 2), 0.5)
    alpha, eps = m_step(binary_toy, resp, priors)
    with pytest.raises(ContractError):
        elbo_direct(binary_toy, resp, alpha, eps, priors, 1)


def test_stats_route_single_cluster(binary_toy):
    priors = Priors().resolve(binary_toy.cardinalities)
    resp = np.ones((4, 1))
    alpha, eps = m_step(binary_toy, resp, priors)
    stats = suff_stats(alpha, eps, priors, binary_toy.cardinalities)
    a = elbo_from_stats(stats, alpha, eps, priors, binary_toy.cardinalities, 0.0, 1)
    assert a == pytest.approx(elbo_direct(binary_toy, resp, alpha, eps, priors, 1), rel=1e-12)


def test_stats_route_block_diagonal(rng):
    a_data = random_dataset(rng, 15, [2, 3])
    b_data = random_dataset(rng, 11, [2, 3])
    priors = Priors().resolve([2, 3])
    ra = rng.dirichlet(np.ones(2), size=15)
    rb = rng.dirichlet(np.ones(3), size=11)
    pa, pb = m_step(a_data, ra, priors), m_step(b_data, rb, priors)
    alpha = np.concatenate([pa[0], pb[0]])
    eps = np.vstack([pa[1], pb[1]])
    stats = suff_stats(alpha, eps, priors, [2, 3])
    ent = assignment_entropy(ra) + assignment_entropy(rb)
    joint = CategoricalDataset(np.vstack([a_data.values, b_data.values]), [2, 3])
    block = np.zeros((26, 5))
    block[:15, :2] = ra
    block[15:, 2:] = rb
    want = elbo_direct(joint, block, alpha, eps, priors, 5)
    assert elbo_from_stats(stats, alpha, eps, priors, [2, 3], ent, 5) == pytest.approx(want, rel=1e-8)


@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(2, 30))
def test_stats_route_equals_direct(seed, k, n):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, n, rng.integers(2, 5, size=3))
    priors = Priors().resolve(data.cardinalities)
    resp = rng.dirichlet(np.ones(k), size=n)
    alpha, eps = m_step(data, resp, priors)
    direct = elbo_direct(data, resp, alpha, eps, priors, k + 2)
    stats = suff_stats(alpha, eps, priors, data.cardinalities)
    via = elbo_from_stats(stats, alpha, eps, priors, data.cardinalities, assignment_entropy(resp), k + 2)
    assert abs(via - direct) < 1e-8 * abs(direct)


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_em_invariants_and_monotonicity(seed, k):
    rng = np.random.default_rng(seed)
    data = random_dataset(rng, 50, rng.integers(2, 4, size=5))
    priors = Priors().resolve(data.cardinalities)
    resp = rng.dirichlet(np.ones(k), size=50)
    alpha, eps = m_step(data, resp, priors)
    prev = elbo_direct(data, resp, alpha, eps, priors, k)
    for _ in range(8):
        resp, _ = e_step_with_entropy(data, alpha, eps)
        assert np.max(np.abs(resp.sum(axis=1) - 1)) < 1e-9
        after_e = elbo_direct(data, resp, alpha, eps, priors, k)
        alpha, eps = m_step(data, resp, priors)
        after_m = elbo_direct(data, resp, alpha, eps, priors, k)
        assert after_e >= prev - 1e-7 * abs(prev)
        assert after_m >= after_e - 1e-7 * abs(after_e)
        prev = after_m
        assert abs((alpha - priors.alpha0).sum() - 50) < 1e-6
        assert np.all(alpha >= priors.alpha0)
        offs = data.offsets
        for j in range(data.n_vars):
            seg = eps[:, offs[j]:offs[j + 1]].sum(axis=1) - priors.epsilon[j] * data.cardinalities[j]
            np.testing.assert_allclose(seg, alpha - priors.alpha0, atol=1e-6)


# ---------------------------------------------------------------------------
# convergence


def test_check_convergence_examples():
    assert check_convergence([-100.0] * 4, 1e-6)
    assert not check_convergence([-100.0, -100.0], 1e-6)
    base = -1000.0
    trace = np.cumsum([base, 1e-3 * 1000, 1e-9 * 1000, 1e-9 * 1000, 1e-9 * 1000]).tolist()
    assert check_convergence(trace, 5e-7)
    assert not check_convergence(trace[:-1], 5e-7)
