import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedmerdel import jsonio
from fedmerdel.data import CategoricalDataset
from fedmerdel.datagen import GenSpec, generate, partition
from fedmerdel.errors import ContractError, IncompatiblePriorsError, SchemaError
from fedmerdel.federation import (BatchSummary, LocalEntropyOracle, aggregate_variable_selection,
                                  combine_summaries, entropy_correction, global_elbo, global_merge_pair,
                                  greedy_search, map_labels, random_search, run_federated, summarize_batch)
from fedmerdel.merdel import FittedModel, MerDelConfig
from fedmerdel.model import Priors, VariationalState, assignment_entropy, elbo_direct, m_step
from toys import materialize, random_dataset, toy_summary

PRIORS = Priors()


def _toy_batches(seed, n_batches=2, n=40, card=(2, 3, 2), k=3):
    rng = np.random.default_rng(seed)
    datas, resps = [], []
    for _ in range(n_batches):
        data = random_dataset(rng, int(rng.integers(5, n + 1)), card)
        datas.append(data)
        resps.append(rng.dirichlet(np.full(k, 0.5), size=data.n_rows))
    summaries = [toy_summary(d, r, PRIORS, f"b{i}") for i, (d, r) in enumerate(zip(datas, resps))]
    pooled = CategoricalDataset(np.vstack([d.values for d in datas]), card)
    return summaries, datas, resps, pooled


def _direct(g, resps, pooled):
    r = materialize(g, resps)
    priors = PRIORS.resolve(pooled.cardinalities)
    alpha, eps = m_step(pooled, r, priors)
    np.testing.assert_allclose(alpha, g.alpha_star, rtol=1e-12)
    np.testing.assert_allclose(eps, g.eps_star, rtol=1e-12)
    return elbo_direct(pooled, r, g.alpha_star, g.eps_star, priors, g.k_total_for_prior)


def _fitted(data, resp, k_init=None, converged=True):
    priors = PRIORS.resolve(data.cardinalities)
    alpha, eps = m_step(data, resp, priors)
    state = VariationalState(resp, alpha, eps, k_init or resp.shape[1], [0.0], assignment_entropy(resp))
    return FittedModel(state, np.argmax(resp, axis=1), int(np.sum(resp.sum(0) > 0.5)), 0.0, converged=converged)


# ---------------------------------------------------------------------------
# summaries


def test_summary_drops_zombie_and_keeps_k_init(rng):
    data = random_dataset(rng, 30, [2, 2])
    resp = np.zeros((30, 4))
    resp[np.arange(30), rng.integers(0, 3, size=30)] = 1.0
    s = summarize_batch(_fitted(data, resp), data, PRIORS, "b0")
    assert s.k_clusters == 3 and s.k_init == 4
    assert s.entropy == 0.0
    s.check()


def test_summary_round_trip_bit_exact(rng):
    data = random_dataset(rng, 30, [2, 3])
    resp = rng.dirichlet(np.ones(3), size=30)
    s = summarize_batch(_fitted(data, resp), data, PRIORS, "b0")
    back = BatchSummary.from_dict(jsonio.loads(jsonio.dumps(s.to_dict())))
    assert np.array_equal(back.alpha_star, s.alpha_star) and np.array_equal(back.eps_star, s.eps_star)
    assert back.entropy == s.entropy and back.fingerprint == s.fingerprint
    assert back.local_labels is None and back.resp is None
    assert "local_labels" not in s.to_dict() and "resp" not in s.to_dict()


def test_summary_schema_errors(rng):
    data = random_dataset(rng, 10, [2, 2])
    d = summarize_batch(_fitted(data, np.full((10, 2), 0.5)), data, PRIORS, "b0").to_dict()
    for bad in ({**d, "version": 2}, {k: v for k, v in d.items() if k != "entropy"},
                {**d, "k_clusters": 5}, {**d, "fingerprint": "0" * 64},
                {**d, "eps_star": [[[1.0, 2.0, 3.0], [1.0, 1.0]]] * 2}, ["not", "a", "dict"]):
        with pytest.raises(SchemaError):
            BatchSummary.from_dict(bad)


def test_summary_requires_converged_fit(rng):
    data = random_dataset(rng, 10, [2, 2])
    with pytest.raises(ContractError):
        summarize_batch(_fitted(data, np.full((10, 2), 0.5), converged=False), data, PRIORS, "b0")


def test_privacy_flag_and_withhold():
    gen = generate(GenSpec(n=200, p=20, k_true=3, sizes=(120, 77, 3), beta=(0.3, 0.3), seed=1))
    resp = np.eye(3)[gen.labels]
    fitted = _fitted(gen.data, resp)
    s = summarize_batch(fitted, gen.data, PRIORS, "b0")
    sizes = s.alpha_star - PRIORS.alpha0
    assert s.flagged == tuple(int(k) for k in np.flatnonzero(sizes < 5))
    assert len(s.flagged) == 1
    w = summarize_batch(fitted, gen.data, PRIORS, "b0", withhold=True)
    assert w.flagged == () and np.all(w.alpha_star - PRIORS.alpha0 >= 5)
    assert w.k_clusters == 2
    w.check()


# ---------------------------------------------------------------------------
# combination and the global ELBO


def test_single_summary_matches_local_elbo(rng):
    data = random_dataset(rng, 50, [2, 3, 2])
    resp = rng.dirichlet(np.ones(3), size=50)
    g = combine_summaries([toy_summary(data, resp, PRIORS, "b0", k_init=6)])
    s = g
    priors = PRIORS.resolve(data.cardinalities)
    local = elbo_direct(data, resp, s.alpha_star, s.eps_star, priors, 6)
    assert global_elbo(g) == pytest.approx(local, rel=1e-6)


def test_combine_conserves_counts():
    summaries, *_ = _toy_batches(3, n=50)
    g = combine_summaries(summaries)
    assert np.sum(g.alpha_star - PRIORS.alpha0) == pytest.approx(sum(s.n_obs for s in summaries), abs=1e-9)
    assert g.k_total_for_prior == sum(s.k_init for s in summaries)
    assert g.entropy_total == pytest.approx(sum(s.entropy for s in summaries))


def test_combine_rejects_mismatches(rng):
    a = random_dataset(rng, 10, [2, 2])
    s0 = toy_summary(a, np.full((10, 2), 0.5), PRIORS, "b0")
    s1 = toy_summary(a, np.full((10, 2), 0.5), Priors(alpha0=0.1), "b1")
    with pytest.raises(IncompatiblePriorsError):
        combine_summaries([s0, s1])
    b = random_dataset(rng, 10, [2, 3])
    with pytest.raises(SchemaError):
        combine_summaries([s0, toy_summary(b, np.full((10, 2), 0.5), PRIORS, "b1")])
    with pytest.raises(ContractError):
        combine_summaries([])


@pytest.mark.parametrize("seed", range(5))
def test_global_elbo_equals_block_diagonal(seed):
    summaries, _, resps, pooled = _toy_batches(seed, n=40)
    g = combine_summaries(summaries)
    want = _direct(g, resps, pooled)
    assert abs(global_elbo(g) - want) < 1e-8 * abs(want)


def test_global_elbo_order_invariant():
    summaries, *_ = _toy_batches(11, n_batches=3)
    a = global_elbo(combine_summaries(summaries))
    b = global_elbo(combine_summaries(summaries[::-1]))
    assert a == pytest.approx(b, rel=1e-13)


def test_merge_delta_additive():
    summaries, *_ = _toy_batches(5, n_batches=2, k=3)
    g = combine_summaries(summaries)
    # (0 from b0, 3 from b1) and (1 from b0, 4 from b1) are disjoint pairs
    base = global_elbo(g)
    d1 = global_elbo(global_merge_pair(g, 0, 3)) - base
    after_other = global_merge_pair(g, 1, 4)
    d2 = global_elbo(global_merge_pair(after_other, 0, 3)) - global_elbo(after_other)
    assert d1 == pytest.approx(d2, rel=1e-6, abs=1e-9)


# ---------------------------------------------------------------------------
# merge pair


def test_merge_with_empty_cluster_keeps_parameters(rng):
    data = random_dataset(rng, 20, [2, 3])
    resp = np.column_stack([rng.dirichlet(np.ones(2), size=20), np.zeros(20)])
    other = random_dataset(rng, 20, [2, 3])
    g = combine_summaries([toy_summary(data, resp, PRIORS, "b0"),
                           toy_summary(other, np.column_stack([np.ones(20), np.zeros(20)]), PRIORS, "b1")])
    merged = global_merge_pair(g, 0, 4)
    np.testing.assert_allclose(merged.alpha_star[0], g.alpha_star[0], rtol=0, atol=1e-15)
    np.testing.assert_allclose(merged.eps_star[0], g.eps_star[0], rtol=0, atol=1e-14)


def test_merge_conserves_T_and_matches_pooled_fit(rng):
    a = random_dataset(rng, 25, [2, 3, 2])
    b = random_dataset(rng, 15, [2, 3, 2])
    ra = np.eye(2)[rng.integers(0, 2, size=25)]
    rb = np.eye(2)[rng.integers(0, 2, size=15)]
    g = combine_summaries([toy_summary(a, ra, PRIORS, "b0"), toy_summary(b, rb, PRIORS, "b1")])
    merged = global_merge_pair(g, 0, 2)
    T = g.alpha_star - PRIORS.alpha0
    assert merged.alpha_star[0] - PRIORS.alpha0 == pytest.approx(T[0] + T[2], abs=1e-12)
    pooled_rows = np.vstack([a.values[ra[:, 0] == 1], b.values[rb[:, 0] == 1]])
    pooled = CategoricalDataset(pooled_rows, [2, 3, 2])
    _, eps = m_step(pooled, np.ones((pooled.n_rows, 1)), PRIORS.resolve([2, 3, 2]))
    np.testing.assert_allclose(merged.eps_star[0], eps[0], atol=1e-6)
    assert merged.entropy_total == g.entropy_total


def test_same_batch_merge_needs_correction():
    summaries, _, resps, pooled = _toy_batches(2)
    g = combine_summaries(summaries)
    with pytest.raises(ContractError):
        global_merge_pair(g, 0, 1)
    delta = entropy_correction(resps[0], [0], [1])
    merged = global_merge_pair(g, 0, 1, entropy_delta=delta)
    want = _direct(merged, resps, pooled)
    assert abs(global_elbo(merged) - want) < 1e-8 * abs(want)


def test_entropy_correction_closed_form():
    r = np.array([[0.5, 0.5, 0.0], [0.2, 0.3, 0.5]])
    want = (0.0 - 2 * 0.5 * np.log(0.5)) + (0.5 * np.log(0.5) - 0.2 * np.log(0.2) - 0.3 * np.log(0.3))
    assert entropy_correction(r, [0], [1]) == pytest.approx(want, rel=1e-13)
    assert entropy_correction(np.eye(3), [0], [1]) == 0.0


@given(st.integers(0, 100_000), st.integers(2, 3))
def test_oracle_equivalence_along_random_merges(seed, n_batches):
    summaries, _, resps, pooled = _toy_batches(seed, n_batches=n_batches)
    g = combine_summaries(summaries)
    rng = np.random.default_rng(seed)
    oracle = LocalEntropyOracle(resps)
    from fedmerdel.federation import merge_entropy_delta
    mass = np.sum(g.alpha_star - PRIORS.alpha0)
    while g.n_clusters > 1:
        k1, k2 = sorted(rng.choice(g.n_clusters, size=2, replace=False))
        g = global_merge_pair(g, int(k1), int(k2), entropy_delta=merge_entropy_delta(g, k1, k2, oracle))
        want = _direct(g, resps, pooled)
        assert abs(global_elbo(g) - want) < 1e-8 * abs(want)
        assert abs(np.sum(g.alpha_star - PRIORS.alpha0) - mass) < 1e-9
    assert len(g.merge_history) == sum(s.k_clusters for s in summaries) - 1


# ---------------------------------------------------------------------------
# searches


@pytest.fixture(scope="module")
def two_batch_fit():
    gen = generate(GenSpec(n=1200, p=60, k_true=5, seed=21))
    batches = partition(gen.data, gen.labels, "random", 2, seed=0)
    return gen, batches, run_federated([b.data for b in batches], MerDelConfig(k_init=10, seed=3))


def test_greedy_recovers_shared_clusters(two_batch_fit):
    gen, batches, res = two_batch_fit
    assert [s.k_clusters for s in res.summaries] == [5, 5]
    assert res.model.n_clusters == 5
    for members in res.model.membership:
        assert sorted(b for b, _ in members) == [0, 1]
    assert len(res.model.merge_history) == 10 - res.model.n_clusters
    trace = np.asarray(res.model.elbo_trace)
    assert np.all(np.diff(trace) > 0)


def test_greedy_single_batch_noop(rng):
    data = random_dataset(rng, 30, [2, 2])
    g = combine_summaries([toy_summary(data, rng.dirichlet(np.ones(3), size=30), PRIORS, "b0")])
    out = greedy_search(g)
    assert out.n_clusters == 3 and out.merge_history == []


def test_greedy_keeps_unique_cluster():
    gen = generate(GenSpec(n=2400, p=60, k_true=6, seed=5))
    batches = partition(gen.data, gen.labels, "exclusive", 3, seed=1, exclusive_cluster=0)
    res = run_federated([b.data for b in batches], MerDelConfig(k_init=12, seed=1))
    home = next(i for i, b in enumerate(batches) if np.any(b.labels == 0))
    truth = np.concatenate([b.labels for b in batches])
    owner = np.bincount(res.labels[truth == 0]).argmax()
    assert res.model.batch_set(owner) == {home}


@pytest.mark.parametrize("seed", range(4))
def test_greedy_never_joins_same_batch(seed):
    gen = generate(GenSpec(n=600, p=30, k_true=4, seed=seed))
    batches = partition(gen.data, gen.labels, "random", 3, seed=seed)
    res = run_federated([b.data for b in batches], MerDelConfig(k_init=8, seed=seed),
                        criterion=["correlation", "kl", "bhattacharyya", "random"][seed])
    for members in res.model.membership:
        owners = [b for b, _ in members]
        assert len(owners) == len(set(owners))


def test_random_search_stops_below_floor(rng):
    data = random_dataset(rng, 20, [2, 2])
    ra = np.eye(2)[np.arange(20) % 2]
    eps_a = toy_summary(data, ra, PRIORS, "b0")
    eps_a.eps_star = np.array([[5.0, 1.0, 1.0, 5.0], [1.0, 5.0, 5.0, 1.0]])
    # anti-correlated first-category profiles: -1 everywhere
    g = combine_summaries([eps_a])
    out = random_search(g, "correlation", np.random.default_rng(0))
    assert out.merge_history == []


def test_random_search_merges_duplicates_often():
    rng = np.random.default_rng(0)
    base = random_dataset(rng, 60, [2] * 12)
    labels = np.arange(60) % 3
    resp = np.eye(3)[labels]
    merged_within = 0
    trials = 60
    for seed in range(trials):
        s0 = toy_summary(base, resp, PRIORS, "b0")
        s1 = toy_summary(base, resp, PRIORS, "b1")
        g = combine_summaries([s0, s1])
        out = random_search(g, "correlation", np.random.default_rng(seed), stop_after=10, cross_batch_only=True)
        first = out.merge_history[:1]
        merged_within += bool(out.merge_history) and first[0][1] - first[0][0] == 3
        assert out.n_clusters <= g.n_clusters
    # each cluster's duplicate sits in the other batch; at least one is found with high probability
    assert merged_within / trials >= 1 - (1 - 1 / 3) ** 10 - 0.1


def test_random_search_same_batch_uses_oracle():
    summaries, datas, resps, pooled = _toy_batches(9, n_batches=2, k=4)
    g = combine_summaries(summaries)
    oracle = LocalEntropyOracle(resps)
    out = random_search(g, "kl", np.random.default_rng(1), entropy_corrector=oracle, stop_after=20)
    want = _direct(out, resps, pooled)
    assert abs(global_elbo(out) - want) < 1e-8 * abs(want)
    assert np.all(np.diff(out.elbo_trace) > 0)


# ---------------------------------------------------------------------------
# labels and selection


def test_map_labels_cases():
    summaries, *_ = _toy_batches(4, n_batches=2, k=2)
    g = combine_summaries(summaries)
    la, lb = np.array([0, 1, 1]), np.array([1, 0])
    np.testing.assert_array_equal(map_labels([la, lb], g), [0, 1, 1, 3, 2])
    m = global_merge_pair(g, 0, 3)  # b0:0 with b1:1
    np.testing.assert_array_equal(map_labels([la, lb], m), [0, 1, 1, 0, 2])
    one = global_merge_pair(global_merge_pair(m, 1, 2), 0, 1, entropy_delta=0.0)
    assert set(map_labels([la, lb], one)) == {0}
    with pytest.raises(ContractError):
        map_labels([np.array([2]), lb], g)
    with pytest.raises(ContractError):
        map_labels([la], g)


def test_aggregate_variable_selection(rng):
    data = random_dataset(rng, 10, [2, 2, 2])
    s = [toy_summary(data, np.ones((10, 1)), PRIORS, f"b{i}") for i in range(5)]
    votes = np.array([[1, 1, 1], [1, 1, 0], [1, 0, 0], [1, 1, 1], [1, 1, 0]], dtype=bool)
    for summary, v in zip(s, votes):
        summary.selected_vars = v
    np.testing.assert_array_equal(aggregate_variable_selection(s), [True, True, False])
    np.testing.assert_array_equal(aggregate_variable_selection(s[2:3]), [True, False, False])
    s[0].selected_vars = None
    with pytest.raises(ContractError):
        aggregate_variable_selection(s)
