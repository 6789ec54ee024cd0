import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

import oracles as O
from prism import clustering as C


def _blocks(sizes, within=0.9, cross=0.1, noise=0.0, rng=None):
    lab = np.repeat(np.arange(len(sizes)), sizes)
    s = np.where(lab[:, None] == lab[None, :], within, cross).astype(float)
    if noise:
        e = rng.normal(scale=noise, size=s.shape)
        s = s + np.triu(e, 1) + np.triu(e, 1).T
    np.fill_diagonal(s, 1.0)
    return np.clip(s, -1, 1), lab


def _random_distance(rng, n, kind):
    if kind == 0:
        d = rng.random((n, n))
    elif kind == 1:
        d = np.round(rng.random((n, n)), 1)  # many ties
    else:
        c = rng.integers(0, 3, n)
        d = np.where(c[:, None] == c[None, :], 0.1, 0.8) + 0.05 * rng.random((n, n))
    d = np.triu(d, 1)
    return d + d.T


def _same_partition(a, b):
    return adjusted_rand_score(a, b) == 1.0


# --- distances --------------------------------------------------------------


def test_similarity_to_distance_range():
    d = C.similarity_to_distance(np.array([[1.0, -1.0], [-1.0, 1.0]]))
    assert d.tolist() == [[0.0, 1.0], [1.0, 0.0]]


def test_graph_validation():
    with pytest.raises(C.ClusteringError):
        C.SimilarityGraph(np.array([[1.0, 0.5], [0.2, 1.0]]))
    with pytest.raises(C.ClusteringError):
        C.SimilarityGraph(np.ones((2, 3)))
    with pytest.raises(C.ClusteringError):
        C.SimilarityGraph(np.array([[1.0, np.nan], [np.nan, 1.0]]))
    g = C.SimilarityGraph(np.array([[0.3, 0.5], [0.5, 0.7]]))
    assert np.all(np.diag(g.sim) == 1.0)


def _line():
    pos = np.array([0.0, 1.0, 2.0, 10.0])
    return np.abs(pos[:, None] - pos[None, :])


def test_core_distance_line_example():
    assert C.core_distance(_line(), 2)[0] == 2.0


def test_core_distance_equal_distances():
    d = np.full((5, 5), 0.3)
    np.fill_diagonal(d, 0.0)
    for k in range(1, 5):
        assert np.all(C.core_distance(d, k) == 0.3)


def test_core_distance_k1_is_nearest(rng):
    d = _random_distance(rng, 9, 0)
    np.testing.assert_array_equal(C.core_distance(d, 1), np.where(np.eye(9, dtype=bool), np.inf, d).min(1))


def test_core_distance_rejects_bad_k():
    with pytest.raises(C.ClusteringError):
        C.core_distance(_line(), 4)
    with pytest.raises(C.ClusteringError):
        C.core_distance(_line(), 0)


def test_mutual_reachability_line_example():
    m = C.mutual_reachability(_line(), 2)
    assert m[0, 1] == 2.0


def test_mutual_reachability_properties(rng):
    for kind in range(3):
        d = _random_distance(rng, 10, kind)
        m = C.mutual_reachability(d, 3)
        off = ~np.eye(10, dtype=bool)
        assert np.all(m[off] >= d[off]) and np.array_equal(m, m.T) and np.all(np.diag(m) == 0)
        np.testing.assert_allclose(C.mutual_reachability(2 * d, 3), 2 * m, rtol=0, atol=1e-15)
        np.testing.assert_allclose(m, O.mreach_matrix(d, 3), rtol=0, atol=0)


# --- spanning tree and extraction vs oracles -------------------------------


def test_mst_matches_exhaustive_search(rng):
    for it in range(60):
        n = int(rng.integers(2, 8))
        w = C.mutual_reachability(_random_distance(rng, n, it % 3), min(3, n - 1))
        tree = frozenset((i, j) for i, j, _ in C.minimum_spanning_tree(w))
        assert tree == O.brute_force_mst(w)


def test_mst_certificate_up_to_ten_nodes(rng):
    # n^(n-2) trees is too many past 7 nodes: check the cycle-property certificate
    for it in range(30):
        n = int(rng.integers(8, 11))
        w = C.mutual_reachability(_random_distance(rng, n, it % 3), 3)
        tree = [(i, j) for i, j, _ in C.minimum_spanning_tree(w)]
        assert O.is_spanning_tree(n, tree) and O.satisfies_cycle_property(w, tree)


def test_extraction_matches_reference(rng):
    for it in range(150):
        n = int(rng.integers(2, 11))
        d = _random_distance(rng, n, it % 3)
        got = C.hdbscan(d, k=3, min_cluster_size=2, assign_all=False).labels
        want = O.flat_labels(n, O.reference_eom(O.mreach_matrix(d, min(3, n - 1)), 2))
        np.testing.assert_array_equal(got, want)
        full = C.hdbscan(d, k=3, min_cluster_size=2).labels
        if (want >= 0).any():
            np.testing.assert_array_equal(full, O.nearest_assignment(want, d))


def test_mst_invariant_under_monotone_transform(rng):
    for _ in range(20):
        w = C.mutual_reachability(_random_distance(rng, 9, 0), 3)
        tree = {(i, j) for i, j, _ in C.minimum_spanning_tree(w)}
        for f in (np.sqrt, np.exp, lambda x: 3 * x + 1):
            assert {(i, j) for i, j, _ in C.minimum_spanning_tree(f(w))} == tree


# --- hdbscan behaviour ------------------------------------------------------


def test_two_planted_blocks():
    s, lab = _blocks([5, 5])
    r = C.hdbscan(C.SimilarityGraph(s))
    assert r.num_clusters == 2 and _same_partition(r.labels, lab)


def test_single_block_is_one_cluster():
    s, _ = _blocks([8])
    r = C.hdbscan(C.SimilarityGraph(s))
    assert r.num_clusters == 1 and np.all(r.labels == 0)


def test_hdbscan_never_returns_noise(rng):
    for _ in range(30):
        n = int(rng.integers(2, 25))
        s = rng.uniform(-1, 1, (n, n))
        s = (s + s.T) / 2
        r = C.hdbscan(C.SimilarityGraph(s))
        assert np.all(r.labels != C.NOISE)
        assert r.num_clusters == len(set(r.labels.tolist()))


def test_hdbscan_errors():
    with pytest.raises(C.ClusteringError):
        C.hdbscan(C.SimilarityGraph(np.ones((1, 1))))
    with pytest.raises(C.ClusteringError):
        C.hdbscan(C.SimilarityGraph(np.ones((4, 4))), min_cluster_size=1)


@pytest.mark.parametrize("method", C.METHODS)
def test_node_reordering_invariance(rng, method):
    s, _ = _blocks([6, 9, 7], within=0.8, cross=0.15, noise=0.05, rng=rng)
    perm = rng.permutation(len(s))
    a = C.cluster(s, method).labels
    b = C.cluster(s[np.ix_(perm, perm)], method).labels
    assert _same_partition(a[perm], b)


# --- baselines --------------------------------------------------------------


@pytest.mark.filterwarnings("ignore:Graph is not fully connected")
@pytest.mark.parametrize("method", C.METHODS)
def test_three_perfect_blocks(method):
    s, lab = _blocks([4, 6, 5], within=1.0, cross=0.0)
    r = C.cluster(s, method)
    assert r.num_clusters == 3 and _same_partition(r.labels, lab)


def test_ahc_stops_at_the_threshold():
    s, _ = _blocks([3, 3], within=0.6, cross=0.0)  # within 0.2, across exactly 0.5
    assert C.baseline_cluster(C.SimilarityGraph(s), "ahc", threshold=0.5).num_clusters == 2
    assert C.baseline_cluster(C.SimilarityGraph(s), "ahc", threshold=0.51).num_clusters == 1


def test_ahc_small_threshold_gives_singletons():
    s, _ = _blocks([4, 4])
    r = C.baseline_cluster(C.SimilarityGraph(s), "ahc", threshold=1e-3)
    assert r.num_clusters == 8 and sorted(r.labels.tolist()) == list(range(8))


def test_kmeans_is_deterministic(rng):
    s, _ = _blocks([5, 7, 6], within=0.7, cross=0.3, noise=0.1, rng=rng)
    runs = [C.baseline_cluster(C.SimilarityGraph(s), "kmeans", seed=4).labels for _ in range(3)]
    assert all(np.array_equal(runs[0], r) for r in runs)


def test_unknown_method():
    with pytest.raises(C.ClusteringError):
        C.baseline_cluster(C.SimilarityGraph(np.eye(3)), "dbscan")


def test_eigengap_perfect_blocks():
    s, _ = _blocks([4, 5, 6], within=1.0, cross=0.0)
    vals = np.linalg.eigvalsh(C._normalized_laplacian(s))
    assert np.sum(vals < 1e-9) == 3
    assert C.count_speakers_eigengap(C.SimilarityGraph(s)) == 3


def test_eigengap_all_ones():
    assert C.count_speakers_eigengap(C.SimilarityGraph(np.ones((6, 6)))) == 1


def test_eigengap_noisy_five_blocks():
    rng = np.random.default_rng(2024)
    hits = 0
    for _ in range(100):
        sizes = rng.integers(4, 9, size=5)
        s, _ = _blocks(sizes, within=0.9, cross=0.1, noise=0.05, rng=rng)
        hits += C.count_speakers_eigengap(C.SimilarityGraph(s)) == 5
    assert hits >= 95
