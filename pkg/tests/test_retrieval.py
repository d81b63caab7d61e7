import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtmh.retrieval import (Preranker, RankedCandidates, RetrievalService, ServeSettings,
                            ann_search, exhaustive_search, inertia, kmeans_fit, load_index,
                            prerank, quota_count, quota_merge, save_index, top_k)
from mtmh.artifacts import ArtifactError, array_checksum


def ranked(items, scores=None, head="") -> RankedCandidates:
    items = np.asarray(items, dtype=np.int64)
    if scores is None:
        scores = -np.arange(len(items), dtype=np.float64)
    return RankedCandidates(items, np.asarray(scores, dtype=np.float64), head)


def separated_clusters(n_clusters=16, per=100, dim=8, spread=0.05, seed=0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_clusters, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.repeat(np.arange(n_clusters), per)
    return centers[labels] + spread * rng.normal(size=(len(labels), dim)), labels


# -- top-k and tie rule -------------------------------------------------------


def test_top_k_ties_by_id():
    items, scores = top_k(np.array([9, 3, 5, 1]), np.array([1.0, 2.0, 1.0, 2.0]), 3)
    assert items.tolist() == [1, 3, 5]


@given(st.lists(st.integers(-3, 3), min_size=1, max_size=40), st.integers(1, 50))
def test_top_k_matches_full_sort(values, k):
    items = np.arange(len(values))[::-1].copy()
    scores = np.array(values, dtype=np.float64)
    got, _ = top_k(items, scores, k)
    expect = sorted(zip(-scores, items))[:k]
    assert got.tolist() == [i for _, i in expect]


# -- k-means --------------------------------------------------------------------


def test_square_corners_zero_inertia():
    X = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    idx = kmeans_fit(X, 4, iters=5, seed=0, normalize=False)
    assert sorted(idx.assignments.tolist()) == [0, 1, 2, 3]
    assert inertia(idx) == 0.0


def test_single_cluster_is_mean():
    X = np.random.default_rng(0).normal(size=(50, 3))
    idx = kmeans_fit(X, 1, iters=3, seed=0, normalize=False)
    assert np.allclose(idx.centroids[0], X.mean(axis=0))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 12), normalize=st.booleans())
def test_lloyd_inertia_non_increasing(seed, k, normalize):
    X = np.random.default_rng(seed).normal(size=(80, 4))
    h = np.array(kmeans_fit(X, k, iters=10, seed=seed, normalize=normalize).inertia_history)
    assert np.all(np.diff(h) <= 1e-9 * max(1.0, h[0]))


def test_no_empty_clusters_with_duplicates():
    X = np.vstack([np.zeros((30, 2)), np.ones((2, 2))])
    idx = kmeans_fit(X, 5, iters=5, seed=0, normalize=False)
    assert all(len(lst) > 0 for lst in idx.inverted_lists)
    assert sum(len(lst) for lst in idx.inverted_lists) == len(X)


def test_kmeans_argument_errors():
    with pytest.raises(ValueError, match="k="):
        kmeans_fit(np.zeros((3, 2)), 4)
    with pytest.raises(ValueError, match="iters"):
        kmeans_fit(np.zeros((3, 2)), 2, iters=0)


def test_kmeans_deterministic():
    X = np.random.default_rng(1).normal(size=(200, 5))
    a, b = kmeans_fit(X, 8, seed=3), kmeans_fit(X, 8, seed=3)
    assert np.array_equal(a.centroids, b.centroids)
    assert np.array_equal(a.assignments, b.assignments)


# -- search -----------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 10), normalize=st.booleans(),
       K_ann=st.integers(1, 70))
def test_full_probe_equals_exhaustive(seed, k, normalize, K_ann):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(60, 4))
    idx = kmeans_fit(X, k, iters=4, seed=seed, normalize=normalize)
    q = rng.normal(size=4)
    a = ann_search(idx, q, k, K_ann)
    e = exhaustive_search(idx.vectors, q, K_ann, normalized=normalize)
    assert a.items.tolist() == e.items.tolist()
    assert np.array_equal(a.scores, e.scores)


def test_self_query_ranked_first():
    X = np.random.default_rng(0).normal(size=(100, 6))
    idx = kmeans_fit(X, 8, seed=0)
    assert ann_search(idx, X[17], 8, 5).items[0] == 17


def test_exhaustive_full_ranking_and_duplicate_ties():
    X = np.random.default_rng(0).normal(size=(30, 3))
    X[20] = X[4]
    res = exhaustive_search(X, X[4], 30)
    assert sorted(res.items.tolist()) == list(range(30))
    assert res.items[:2].tolist() == [4, 20]


def test_separated_clusters_high_overlap():
    X, _ = separated_clusters()
    idx = kmeans_fit(X, 16, seed=0)
    rng = np.random.default_rng(1)
    overlaps = []
    for q in X[rng.choice(len(X), 200, replace=False)] + 0.02 * rng.normal(size=(200, X.shape[1])):
        a = ann_search(idx, q, 4, 100).items
        e = exhaustive_search(idx.vectors, q, 100, normalized=True).items
        overlaps.append(len(np.intersect1d(a, e)) / 100)
    assert np.mean(overlaps) >= 0.9


def test_probe_quality_monotone_in_C():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(800, 8))
    idx = kmeans_fit(X, 16, seed=0)
    queries = rng.normal(size=(100, 8))
    means = []
    for C in (1, 2, 4, 8, 16):
        ov = [len(np.intersect1d(ann_search(idx, q, C, 50).items,
                                 exhaustive_search(idx.vectors, q, 50, normalized=True).items)) / 50
              for q in queries]
        means.append(np.mean(ov))
    assert np.all(np.diff(means) >= 0) and means[-1] == 1.0


def test_ann_probe_bounds():
    idx = kmeans_fit(np.random.default_rng(0).normal(size=(20, 2)), 4)
    with pytest.raises(ValueError):
        ann_search(idx, np.ones(2), 5, 3)


# -- preranking ------------------------------------------------------------------


def test_prerank_beta_zero_is_similarity_to_history():
    rng = np.random.default_rng(0)
    E = rng.normal(size=(40, 5))
    pre = Preranker(E, np.log(rng.uniform(0.1, 1, size=40)), beta=0.0)
    cands = ranked(np.arange(1, 40))
    out = prerank([cands], pre, np.array([0]), K=10)[0]
    sims = E[1:40] @ E[0]
    assert out.items.tolist() == (np.argsort(-sims)[:10] + 1).tolist()


def test_prerank_large_K_reorders_only():
    rng = np.random.default_rng(0)
    pre = Preranker(rng.normal(size=(20, 3)), rng.normal(size=20), beta=0.5)
    cands = ranked([3, 7, 1, 12])
    out = prerank([cands], pre, np.array([5, 6]), K=10)[0]
    assert sorted(out.items.tolist()) == [1, 3, 7, 12]
    assert np.all(np.diff(out.scores) <= 0)


def test_prerank_heads_isolated():
    rng = np.random.default_rng(0)
    pre = Preranker(rng.normal(size=(50, 3)), rng.normal(size=50), beta=0.1)
    h1 = ranked(np.arange(0, 25))
    h2 = ranked(np.arange(20, 50))
    both = prerank([h1, h2], pre, np.array([1, 2, 3]), K=8)
    alone = prerank([h1, ranked([])], pre, np.array([1, 2, 3]), K=8)
    assert both[0].items.tolist() == alone[0].items.tolist()


def test_prerank_empty_history_uses_popularity():
    pop = np.log(np.array([1.0, 5.0, 2.0, 9.0]))
    pre = Preranker(np.zeros((4, 2)), pop, beta=1.0)
    out = prerank([ranked([0, 1, 2, 3])], pre, np.zeros(0, np.int64), K=2)[0]
    assert out.items.tolist() == [3, 1]


def test_user_vector_uses_recent_history():
    E = np.arange(12, dtype=np.float64).reshape(6, 2)
    pre = Preranker(E, np.zeros(6), history_len=2)
    assert np.allclose(pre.user_vector(np.array([0, 1, 4, 5])), E[[4, 5]].mean(axis=0))


# -- quota merge -------------------------------------------------------------------


def test_quota_rounding():
    assert quota_count(50, 10) == 5
    assert quota_count(25, 30) == 8  # 7.5 rounds half up
    assert quota_count(0, 30) == 0 and quota_count(100, 30) == 30


def test_merge_worked_example():
    a, b, c, d, e, f, g, hh, i, j, k, l = range(12)
    h1 = ranked([a, b, c, d, e, f], [12, 11, 10, 9, 8, 7])
    h2 = ranked([c, g, hh, i, j, k, l], [10, 6, 5, 4, 3, 2, 1])
    merged, short = quota_merge(h1, h2, 50, 10)
    assert not short
    assert set(merged.items.tolist()) == {a, b, c, d, e, g, hh, i, j, k}
    assert np.all(np.diff(merged.scores) <= 0)


list_pairs = st.integers(0, 10_000).map(lambda s: np.random.default_rng(s))


def random_lists(rng, K, overlap):
    n = rng.integers(0, 2 * K + 3)
    m = rng.integers(0, 2 * K + 3)
    pool = 3 * K + 5 if overlap else 10 * K
    h1 = rng.choice(pool, size=min(n, pool), replace=False)
    h2 = rng.choice(pool, size=min(m, pool), replace=False) + (0 if overlap else 10 * K)
    return (ranked(h1, np.sort(rng.normal(size=len(h1)))[::-1]),
            ranked(h2, np.sort(rng.normal(size=len(h2)))[::-1]))


def as_set(rc):
    return set(rc.items.tolist())


@settings(max_examples=200, deadline=None)
@given(rng=list_pairs, K=st.integers(1, 12), overlap=st.booleans())
def test_merge_endpoint_identities(rng, K, overlap):
    h1, h2 = random_lists(rng, K, overlap)
    m100, _ = quota_merge(h1, h2, 100, K)
    m0, _ = quota_merge(h1, h2, 0, K)
    if len(h1) >= K:
        assert as_set(m100) == set(h1.items[:K].tolist())
    if len(h2) >= K:
        assert as_set(m0) == set(h2.items[:K].tolist())


@settings(max_examples=200, deadline=None)
@given(rng=list_pairs, K=st.integers(1, 12), alpha=st.sampled_from([0, 10, 25, 33, 50, 75, 90, 100]))
def test_merge_quota_exact_on_disjoint_lists(rng, K, alpha):
    h1 = ranked(rng.permutation(50)[:K] , np.sort(rng.normal(size=K))[::-1])
    h2 = ranked(100 + rng.permutation(50)[:K], np.sort(rng.normal(size=K))[::-1])
    merged, short = quota_merge(h1, h2, alpha, K)
    assert not short and len(merged) == K
    assert len(as_set(merged) & as_set(h1)) == quota_count(alpha, K)


@settings(max_examples=200, deadline=None)
@given(rng=list_pairs, K=st.integers(1, 12), alpha=st.integers(0, 100), overlap=st.booleans())
def test_merge_fills_K_when_union_suffices(rng, K, alpha, overlap):
    h1, h2 = random_lists(rng, K, overlap)
    merged, short = quota_merge(h1, h2, alpha, K)
    union = as_set(h1) | as_set(h2)
    assert len(merged) == min(K, len(union))
    assert short == (len(union) < K)
    assert len(set(merged.items.tolist())) == len(merged)
    assert as_set(merged) <= union
    n1 = quota_count(alpha, K)
    assert set(h1.items[:n1].tolist()) <= as_set(merged)
    assert set(h2.items[:K - n1].tolist()) <= as_set(merged)


# -- per-user service -----------------------------------------------------------


@pytest.fixture(scope="module")
def service():
    rng = np.random.default_rng(0)
    E1, E2 = rng.normal(size=(300, 6)), rng.normal(size=(300, 6))
    pre = Preranker(E1, np.log(rng.uniform(0.01, 1, 300)), beta=0.1)
    heads = [(kmeans_fit(E1, 8, seed=0), E1), (kmeans_fit(E2, 8, seed=0), E2)]
    return RetrievalService(heads, pre), E1, pre


def test_single_trigger_alpha_100_is_head1_pipeline(service):
    svc, E1, pre = service
    history = np.array([5, 9, 12])
    cfg = ServeSettings(C=3, K_ann=50, K=10, alpha=100, triggers_per_user=1, final_topk_per_user=100)
    res = svc.retrieve_for_user(history, cfg)
    cands = ann_search(svc.heads[0][0], E1[12], 3, 50)
    cands = ranked(cands.items[~np.isin(cands.items, history)])
    expect = prerank([cands], pre, history, 10)[0]
    assert res.final.items.tolist() == expect.items.tolist()


def test_output_excludes_history_and_is_capped(service):
    svc, _, _ = service
    history = np.arange(0, 40, 3)
    cfg = ServeSettings(C=2, K_ann=40, K=15, alpha=50, triggers_per_user=5, final_topk_per_user=1000)
    res = svc.retrieve_for_user(history, cfg)
    assert not np.isin(res.final.items, history).any()
    union = set().union(*(set(c.tolist()) for _, c in res.per_trigger))
    assert set(res.final.items.tolist()) == union
    assert len(res.per_trigger) == 5
    small = svc.retrieve_for_user(history, ServeSettings(C=2, K_ann=40, K=15, final_topk_per_user=7))
    assert len(small.final) == 7


def test_service_deterministic(service):
    svc, E1, pre = service
    cfg = ServeSettings(C=2, K_ann=40, K=10, alpha=50, triggers_per_user=3)
    a = svc.retrieve_for_user(np.array([1, 2, 3, 4]), cfg)
    fresh = RetrievalService(svc.heads, pre)
    b = fresh.retrieve_for_user(np.array([1, 2, 3, 4]), cfg)
    assert a.final.items.tolist() == b.final.items.tolist()
    assert np.array_equal(a.final.scores, b.final.scores)


def test_empty_history_rejected(service):
    with pytest.raises(ValueError, match="no T1"):
        service[0].retrieve_for_user(np.zeros(0, np.int64), ServeSettings())


def test_index_roundtrip_and_checksum(tmp_path):
    E = np.random.default_rng(0).normal(size=(100, 4)).astype(np.float32)
    idx = kmeans_fit(E, 6, seed=0)
    save_index(tmp_path, idx, array_checksum(E))
    back = load_index(tmp_path, E)
    assert np.array_equal(back.centroids, idx.centroids)
    assert all(np.array_equal(a, b) for a, b in zip(back.inverted_lists, idx.inverted_lists))
    q = E[3]
    assert ann_search(back, q, 2, 10).items.tolist() == ann_search(idx, q, 2, 10).items.tolist()
    with pytest.raises(ArtifactError):
        load_index(tmp_path, E + 1)
