import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats as sps

from minp import inference
from minp.errors import ArityMismatch, BootstrapDegenerate
from minp.inference import (
    BootstrapPool,
    MinPVariant,
    build_pool,
    compute_stats,
    critical_value,
    global_test,
    minp_stat,
    order_statistic,
    pool_from_stats,
    pool_rank_pvalues,
    rank_pvalue,
    stats_batch,
    stepdown,
    stepdown_trace,
)
from minp.linalg import RngStream
from minp.mcstudy import DgpSpec, generate
from minp.models import ScorePack, fit_restricted, score_pack

from conftest import random_pd

VARIANTS = list(MinPVariant)


def pack(U, G):
    U = np.asarray(U, dtype=float)
    return ScorePack(U, np.asarray(G, dtype=float), "linear", 100)


def random_pool(seed, B=200, k=3):
    g = np.random.default_rng(seed)
    return pool_from_stats(g.standard_normal((B, k + 2)))


@pytest.fixture(scope="module")
def null_linear():
    d = generate(DgpSpec("linear", 100, (0.0, 0.0)), RngStream(31))
    f = fit_restricted(d)
    return d, f


# statistics


def test_stats_identity():
    s = compute_stats(pack([1, 1], np.eye(2)))
    assert s.t_c == pytest.approx(2.0)
    assert s.t_t == pytest.approx(np.sqrt(2))
    np.testing.assert_allclose(s.t_i, [1, 1])


def test_stats_null_point(gen):
    s = compute_stats(pack([0, 0], random_pd(gen, 2)))
    assert s.t_c == 0 and s.t_t == pytest.approx(0) and np.all(s.t_i == 0)


def test_stats_correlated():
    s = compute_stats(pack([1, -1], [[1, 0.9], [0.9, 1]]))
    assert s.t_c == pytest.approx(19.0, rel=1e-9)
    np.testing.assert_allclose(s.t_i, [1, -1])


@given(st.integers(0, 2**32 - 1), st.integers(2, 4))
def test_stats_batch_matches_scalar(seed, k):
    g = np.random.default_rng(seed)
    G = random_pd(g, k)
    U = g.standard_normal((6, k))
    shared = stats_batch(U, G)
    stacked = stats_batch(U, np.broadcast_to(G, (6, k, k)).copy())
    for b in range(6):
        row = compute_stats(pack(U[b], G)).row()
        np.testing.assert_allclose(shared[b], row, rtol=1e-7, atol=1e-9)
        np.testing.assert_allclose(stacked[b], row, rtol=1e-6, atol=1e-8)


# rank p-values


def test_pool_pvalues_example():
    pv = pool_rank_pvalues(np.array([[1.0], [2], [3], [4]]))
    np.testing.assert_allclose(pv[:, 0], [1.0, 0.75, 0.5, 0.25])


@pytest.mark.parametrize("obs,expected", [(2.5, 0.5), (5, 0.0), (0, 1.0), (2, 0.75)])
def test_rank_pvalue_examples(obs, expected):
    assert rank_pvalue([1, 2, 3, 4], obs) == expected


@given(st.lists(st.integers(-3, 3), min_size=1, max_size=40))
def test_pool_pvalues_definition(values):
    col = np.array(values, dtype=float)
    pv = pool_rank_pvalues(col[:, None])[:, 0]
    B = col.size
    for b in range(B):
        assert pv[b] == np.count_nonzero(col >= col[b]) / B
    assert pv.min() >= 1 / B and pv.max() <= 1


@given(st.integers(0, 2**32 - 1), st.floats(-2, 2), st.floats(0, 2))
def test_rank_pvalue_monotone(seed, obs, bump):
    col = np.random.default_rng(seed).standard_normal(50)
    assert rank_pvalue(col, obs + bump) <= rank_pvalue(col, obs)


# MinP statistics


def test_minp_examples():
    assert minp_stat(None, [0.03, 0.2], "s") == 0.03
    assert minp_stat(0.01, [0.03, 0.2], "sc") == 0.01
    assert minp_stat(0.10, [0.03, 0.2], "st") == 0.03


def test_minp_arity():
    with pytest.raises(ArityMismatch):
        minp_stat(0.1, [0.2], "s")
    with pytest.raises(ArityMismatch):
        minp_stat(None, [0.2], MinPVariant.SC)


# critical values


def test_order_statistic_examples():
    minima = np.arange(1, 101) / 100
    assert order_statistic(np.random.default_rng(0).permutation(minima), 0.05) == pytest.approx(0.05)
    assert order_statistic(np.linspace(0.1, 1, 10), 0.05) == 0.0


def test_critical_value_bad_alpha():
    with pytest.raises(ValueError):
        critical_value(random_pool(0), "s", 1.0)
    with pytest.raises(ValueError):
        critical_value(random_pool(0), (), 0.05)


@given(st.integers(0, 2**32 - 1), st.sampled_from([0.01, 0.05, 0.1, 0.3]))
def test_two_part_critical_values_smaller(seed, alpha):
    pool = random_pool(seed)
    c1 = critical_value(pool, "s", alpha)
    assert critical_value(pool, "sc", alpha) <= c1
    assert critical_value(pool, "st", alpha) <= c1


@given(st.integers(0, 2**32 - 1), st.sampled_from([0.05, 0.1, 0.5]), st.data())
def test_subset_critical_value_monotone(seed, alpha, data):
    k = 4
    pool = random_pool(seed, k=k)
    big = data.draw(st.sets(st.integers(0, k - 1), min_size=1))
    small = data.draw(st.sets(st.sampled_from(sorted(big)), min_size=1))
    assert critical_value(pool, sorted(small), alpha) >= critical_value(pool, sorted(big), alpha)


# global test and stepdown


@pytest.mark.parametrize("variant", VARIANTS)
def test_global_extreme_evidence(variant):
    pool = random_pool(1)
    obs = pool.stats.max(axis=0) + 1
    res = global_test(pool, obs, variant, 0.05)
    assert res.p_m == 0 and res.c_m > 0 and res.reject
    np.testing.assert_array_equal(res.observed_pvalues, 0)


@pytest.mark.parametrize("variant", VARIANTS)
def test_global_median_accepts(variant):
    pool = random_pool(2, B=201)
    res = global_test(pool, np.median(pool.stats, axis=0), variant, 0.05)
    assert res.p_m > 0.3 and not res.reject
    assert stepdown(pool, res, variant, 0.05).K_hat == frozenset()


def test_zero_critical_value_never_rejects():
    pool = random_pool(3, B=10)
    res = global_test(pool, pool.stats.max(axis=0) + 1, "sc", 0.05)
    assert res.c_m == 0 and res.p_m == 0 and not res.reject


def test_global_arity():
    with pytest.raises(ArityMismatch):
        global_test(random_pool(0, k=3), np.zeros(4), "s", 0.05)


def trace(p, c_global, subset_c):
    return stepdown_trace(p, True, c_global, lambda K: subset_c[K])


def test_stepdown_rejects_both():
    res = trace([0.01, 0.04], 0.02, {(1,): 0.05})
    assert res.K_hat == {0, 1}
    assert [s.reject for s in res.steps] == [True, True]
    assert [s.critical_value for s in res.steps] == [0.02, 0.05]


def test_stepdown_second_accepts():
    res = trace([0.01, 0.20], 0.02, {(1,): 0.05})
    assert res.K_hat == {0}
    assert [s.reject for s in res.steps] == [True, False]


def test_stepdown_global_accept_stops():
    res = stepdown_trace([0.001, 0.002], False, 0.02, lambda K: 1.0)
    assert res.steps == () and res.K_hat == frozenset() and not res.global_reject


def test_stepdown_ties_by_index():
    res = trace([0.01, 0.01, 0.01], 0.05, {(1, 2): 0.05, (2,): 0.05})
    assert res.order == (0, 1, 2)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=6), st.floats(0, 0.2))
def test_stepdown_decisions_monotone(p, c):
    res = stepdown_trace(p, True, c, lambda K: c)
    decisions = [s.reject for s in res.steps]
    assert decisions == sorted(decisions, reverse=True)
    assert res.K_hat == {s.index for s in res.steps if s.reject}


@pytest.mark.parametrize("variant", VARIANTS)
def test_stepdown_wrong_variant(variant):
    pool = random_pool(4)
    res = global_test(pool, pool.stats[0], variant, 0.05)
    other = VARIANTS[(VARIANTS.index(variant) + 1) % 3]
    with pytest.raises(ValueError):
        stepdown(pool, res, other, 0.05)


@given(st.integers(0, 2**32 - 1))
def test_consonance_and_agreement(seed):
    g = np.random.default_rng(seed)
    pool = random_pool(seed, B=100)
    obs = pool.stats[g.integers(100)] + g.uniform(0, 3, pool.stats.shape[1])
    results = {v: global_test(pool, obs, v, 0.1) for v in VARIANTS}
    steps = {v: stepdown(pool, results[v], v, 0.1) for v in VARIANTS}
    if results["s"].reject:
        assert steps["s"].K_hat
    first = [steps[v] for v in VARIANTS if steps[v].steps and steps[v].steps[0].reject]
    if len(first) == 3:
        assert first[0].K_hat == first[1].K_hat == first[2].K_hat


@given(st.integers(0, 2**32 - 1), st.integers(0, 4), st.floats(0, 2))
def test_more_evidence_grows_rejections(seed, col, bump):
    pool = random_pool(seed, B=100)
    obs = np.random.default_rng(seed).standard_normal(pool.stats.shape[1]) + 1.5
    more = obs.copy()
    more[col] += bump
    for v in VARIANTS:
        a = global_test(pool, obs, v, 0.1)
        b = global_test(pool, more, v, 0.1)
        assert b.observed_pvalues[col] <= a.observed_pvalues[col]
        assert stepdown(pool, a, v, 0.1).K_hat <= stepdown(pool, b, v, 0.1).K_hat


# bootstrap pool


def test_build_pool_shape_and_determinism(null_linear):
    d, f = null_linear
    a = build_pool(d, f, 50, RngStream(1, 2))
    b = build_pool(d, f, 50, RngStream(1, 2))
    assert a.stats.shape == (50, 4) and a.B == 50 and a.k == 2
    assert a.stats.tobytes() == b.stats.tobytes()
    assert build_pool(d, f, 50, RngStream(1, 3)).stats.tobytes() != a.stats.tobytes()
    with pytest.raises(ValueError):
        build_pool(d, f, 0, RngStream(1))


@pytest.mark.slow
def test_build_pool_worker_invariance():
    d = generate(DgpSpec("arch", 100, (0.0, 0.0)), RngStream(8))
    f = fit_restricted(d)
    one = build_pool(d, f, 2500, RngStream(4), workers=1)
    many = build_pool(d, f, 2500, RngStream(4), workers=3)
    assert one.stats.tobytes() == many.stats.tobytes()
    assert one.pool_pvalues.tobytes() == many.pool_pvalues.tobytes()


def test_build_pool_prefix_stable(null_linear):
    # block substreams: a larger pool extends a smaller one
    d, f = null_linear
    small = build_pool(d, f, 1100, RngStream(6))
    big = build_pool(d, f, 1500, RngStream(6))
    np.testing.assert_array_equal(big.stats[:1100], small.stats)


def test_build_pool_matches_literal_refit(null_linear):
    d, f = null_linear
    pool = build_pool(d, f, 5, RngStream(9))
    from minp.models import bootstrap_shocks, Dataset

    shocks = bootstrap_shocks(f, 5, RngStream(9).child(0).child(0))
    for b in range(5):
        bd = Dataset(f.fitted + shocks[b], d.Z, d.X, d.family)
        row = compute_stats(score_pack(bd, fit_restricted(bd))).row()
        np.testing.assert_allclose(pool.stats[b], row, rtol=1e-7, atol=1e-9)


def test_null_pool_pvalues_uniform(null_linear):
    d, f = null_linear
    pool = build_pool(d, f, 999, RngStream(10))
    grid = np.arange(1, 1000) / 999
    for j in range(1, pool.stats.shape[1]):
        ks = sps.ks_2samp(pool.pool_pvalues[:, j], grid).statistic
        assert ks <= 0.05
    # t_c has an atom at zero: tied draws share p = 1, the rest are uniform
    pv, atom = pool.pool_pvalues[:, 0], pool.stats[:, 0] == 0
    assert np.all(pv[atom] == 1.0)
    u = np.linspace(0.01, 0.95 * (1 - atom.mean()), 50)
    assert np.max(np.abs((pv[:, None] <= u).mean(axis=0) - u)) <= 0.05
    c = critical_value(pool, [0], 0.05)
    assert abs(c - 0.05) <= 0.01


class FlakyScorer:
    """Wraps a scorer and marks chosen first-pass rows as failed."""

    def __init__(self, inner, bad):
        self.inner, self.bad, self.calls = inner, set(bad), 0

    def scores(self, shocks):
        U, G, ok = self.inner.scores(shocks)
        if self.calls == 0:
            ok = ok.copy()
            ok[list(self.bad)] = False
        self.calls += 1
        return U, G, ok


def test_redraw_replaces_failed_rows(null_linear, monkeypatch):
    d, f = null_linear
    clean = build_pool(d, f, 200, RngStream(12))
    real = inference.BatchScorer
    monkeypatch.setattr(inference, "BatchScorer", lambda *a: FlakyScorer(real(*a), [3]))
    pool = build_pool(d, f, 200, RngStream(12))
    assert pool.failures == 1 and pool.redraws == 1
    mask = np.arange(200) != 3
    np.testing.assert_array_equal(pool.stats[mask], clean.stats[mask])
    assert not np.array_equal(pool.stats[3], clean.stats[3])


def test_too_many_failures(null_linear, monkeypatch):
    d, f = null_linear
    real = inference.BatchScorer
    monkeypatch.setattr(inference, "BatchScorer", lambda *a: FlakyScorer(real(*a), [1, 2, 3]))
    with pytest.raises(BootstrapDegenerate) as err:
        build_pool(d, f, 200, RngStream(12))
    assert err.value.failures == 3


def test_pool_dataclass():
    pool = BootstrapPool(np.zeros((5, 4)), np.ones((5, 4)))
    assert pool.B == 5 and pool.k == 2 and pool.redraws == 0
