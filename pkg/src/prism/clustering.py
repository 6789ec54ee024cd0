"""Clustering over pairwise segment similarities.

The main clusterer is HDBSCAN with the mutual-reachability substitution
computed straight from the similarity matrix (segments have no coordinates).
Baselines: k-means in spectral-embedding space, sklearn spectral clustering,
both with eigengap speaker counting, and average-linkage AHC.

Hierarchy convention: at a distance level ``w`` every MST edge of weight
``w`` is removed at once, so tied edges split a cluster simultaneously and the
hierarchy does not depend on how ties are broken. ``lambda = 1 / w``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform

NOISE = -1
MAX_SPEAKERS = 8
_MIN_DIST = 1e-12  # keeps lambda finite for duplicate points


class ClusteringError(ValueError):
    pass


@dataclass
class SimilarityGraph:
    sim: np.ndarray
    node_meta: list = field(default_factory=list)

    def __post_init__(self):
        s = np.asarray(self.sim, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ClusteringError(f"similarity matrix must be square, got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise ClusteringError("similarity matrix has non-finite entries")
        if np.max(np.abs(s - s.T), initial=0.0) > 1e-6:
            raise ClusteringError("similarity matrix is not symmetric")
        s = 0.5 * (s + s.T)
        np.fill_diagonal(s, 1.0)
        self.sim = np.clip(s, -1.0, 1.0)

    @property
    def n(self) -> int:
        return self.sim.shape[0]

    def distance(self) -> np.ndarray:
        return similarity_to_distance(self.sim)


@dataclass
class ClusterResult:
    labels: np.ndarray
    num_clusters: int
    condensed_tree: list[tuple[int, int, float, int]] = field(default_factory=list)


def similarity_to_distance(sim: np.ndarray) -> np.ndarray:
    d = (1.0 - np.asarray(sim, dtype=np.float64)) / 2.0
    d = np.clip(d, 0.0, 1.0)
    np.fill_diagonal(d, 0.0)
    return d


def _as_distance(g) -> np.ndarray:
    """Distances from a :class:`SimilarityGraph`; a bare array is taken as distances."""
    if isinstance(g, SimilarityGraph):
        return g.distance()
    d = np.asarray(g, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ClusteringError(f"distance matrix must be square, got {d.shape}")
    return d


def core_distance(g, k: int) -> np.ndarray:
    """Distance from each node to its k-th nearest other node."""
    d = _as_distance(g)
    n = d.shape[0]
    if k < 1 or k >= n:
        raise ClusteringError(f"k must be in [1, {n - 1}] for {n} nodes, got {k}")
    others = np.where(np.eye(n, dtype=bool), np.inf, d)
    return np.sort(others, axis=1)[:, k - 1]


def mutual_reachability(g, k: int) -> np.ndarray:
    d = _as_distance(g)
    core = core_distance(d, k)
    m = np.maximum(np.maximum(core[:, None], core[None, :]), d)
    np.fill_diagonal(m, 0.0)
    return m


def minimum_spanning_tree(w: np.ndarray) -> list[tuple[int, int, float]]:
    """Kruskal over the complete graph; ties broken by (i, j) so the tree is unique."""
    n = w.shape[0]
    iu, ju = np.triu_indices(n, 1)
    weights = w[iu, ju]
    order = np.lexsort((ju, iu, weights))
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    edges = []
    for e in order:
        a, b = find(int(iu[e])), find(int(ju[e]))
        if a != b:
            parent[a] = b
            edges.append((int(iu[e]), int(ju[e]), float(weights[e])))
            if len(edges) == n - 1:
                break
    return edges


def _lam(w: float) -> float:
    return 1.0 / max(w, _MIN_DIST)


def _components(points: list[int], edges: list[tuple[int, int, float]]) -> list[list[int]]:
    adj = {p: [] for p in points}
    for a, b, _ in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen, comps = set(), []
    for p in points:
        if p in seen:
            continue
        stack, comp = [p], []
        seen.add(p)
        while stack:
            q = stack.pop()
            comp.append(q)
            for r in adj[q]:
                if r not in seen:
                    seen.add(r)
                    stack.append(r)
        comps.append(sorted(comp))
    return sorted(comps)


def condense_tree(n: int, mst: list[tuple[int, int, float]], min_cluster_size: int):
    """Condensed tree rows (parent, child, lambda, child_size); root id is ``n``."""
    tree: list[tuple[int, int, float, int]] = []
    next_id = [n + 1]
    # explicit stack of (cluster id, points, edges) to avoid deep recursion
    work = [(n, list(range(n)), list(mst))]
    while work:
        cid, points, edges = work.pop()
        while True:
            if not edges:
                for p in points:
                    tree.append((cid, p, np.inf, 1))
                break
            w = max(e[2] for e in edges)
            lam = _lam(w)
            edges = [e for e in edges if e[2] < w]
            comps = _components(points, edges)
            big = [c for c in comps if len(c) >= min_cluster_size]
            for c in comps:
                if len(c) < min_cluster_size:
                    tree.extend((cid, p, lam, 1) for p in c)
            if len(big) >= 2:
                for c in big:
                    child = next_id[0]
                    next_id[0] += 1
                    tree.append((cid, child, lam, len(c)))
                    members = set(c)
                    work.append((child, c, [e for e in edges if e[0] in members]))
                break
            if not big:
                break
            points = big[0]
            members = set(points)
            edges = [e for e in edges if e[0] in members]
    return tree


def _stabilities(tree, n: int) -> tuple[dict[int, float], dict[int, list[int]]]:
    birth = {n: 0.0}
    children: dict[int, list[int]] = {}
    for parent, child, lam, _ in tree:
        if child >= n:
            birth[child] = lam
            children.setdefault(parent, []).append(child)
    stability = {c: 0.0 for c in birth}
    for parent, child, lam, size in tree:
        lam = lam if np.isfinite(lam) else _lam(0.0)
        stability[parent] += (lam - birth[parent]) * size
    return stability, children


def select_clusters(tree, n: int) -> list[int]:
    """Excess-of-mass selection; the root is eligible and ties favour the parent."""
    stability, children = _stabilities(tree, n)
    best: dict[int, float] = {}
    chosen: dict[int, list[int]] = {}
    for c in sorted(stability, reverse=True):  # children always have larger ids
        kids = children.get(c, [])
        sub = sum(best[k] for k in kids)
        if kids and sub > stability[c]:
            best[c] = sub
            chosen[c] = [x for k in kids for x in chosen[k]]
        else:
            best[c] = stability[c]
            chosen[c] = [c]
    return sorted(chosen[n])


def _flat_labels(tree, n: int, selected: Sequence[int]) -> np.ndarray:
    parent_of = {child: parent for parent, child, _, _ in tree if child >= n}
    leaf_cluster = {child: parent for parent, child, _, _ in tree if child < n}
    sel = set(selected)
    raw = np.full(n, NOISE, dtype=np.int64)
    for p in range(n):
        c = leaf_cluster[p]
        while c not in sel and c in parent_of:
            c = parent_of[c]
        if c in sel:
            raw[p] = c
    return raw


def _relabel(raw: np.ndarray) -> np.ndarray:
    """Cluster ids 0..C-1 in order of first member; NOISE kept."""
    out = np.full(len(raw), NOISE, dtype=np.int64)
    mapping: dict[int, int] = {}
    for i, r in enumerate(raw):
        if r == NOISE:
            continue
        if r not in mapping:
            mapping[r] = len(mapping)
        out[i] = mapping[r]
    return out


def assign_noise(labels: np.ndarray, dist: np.ndarray) -> np.ndarray:
    """Give every NOISE node the label of its nearest non-noise node."""
    labels = labels.copy()
    core = np.flatnonzero(labels != NOISE)
    if len(core) == 0:
        raise ClusteringError("no non-noise nodes to assign noise to")
    for i in np.flatnonzero(labels == NOISE):
        j = core[np.argmin(dist[i, core])]
        labels[i] = labels[j]
    return labels


def hdbscan(g, k: int = 3, min_cluster_size: int = 2, assign_all: bool = True) -> ClusterResult:
    d = _as_distance(g)
    n = d.shape[0]
    if n < 2:
        raise ClusteringError("hdbscan needs at least 2 nodes")
    if min_cluster_size < 2:
        raise ClusteringError("min_cluster_size must be at least 2")
    k = min(k, n - 1)
    mreach = mutual_reachability(d, k)
    mst = minimum_spanning_tree(mreach)
    tree = condense_tree(n, mst, min_cluster_size)
    selected = select_clusters(tree, n)
    labels = _relabel(_flat_labels(tree, n, selected))
    if assign_all:
        labels = assign_noise(labels, d)
    num = len(set(labels[labels != NOISE].tolist()))
    return ClusterResult(labels, num, tree)


# --- baselines ------------------------------------------------------------

def _normalized_laplacian(sim: np.ndarray) -> np.ndarray:
    a = np.maximum(np.asarray(sim, dtype=np.float64), 0.0)
    deg = a.sum(1)
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1e-300)), 0.0)
    lap = np.eye(len(a)) - inv[:, None] * a * inv[None, :]
    return 0.5 * (lap + lap.T)


def _sim_of(g) -> np.ndarray:
    return g.sim if isinstance(g, SimilarityGraph) else SimilarityGraph(g).sim


def count_speakers_eigengap(g, max_speakers: int = MAX_SPEAKERS) -> int:
    sim = _sim_of(g)
    n = sim.shape[0]
    if n < 2:
        raise ClusteringError("eigengap counting needs at least 2 nodes")
    vals = np.linalg.eigvalsh(_normalized_laplacian(sim))
    top = min(n - 1, max_speakers)
    gaps = vals[1:top + 1] - vals[:top]
    return int(np.argmax(gaps)) + 1


def spectral_embedding(sim: np.ndarray, c: int) -> np.ndarray:
    _, vecs = np.linalg.eigh(_normalized_laplacian(sim))
    emb = vecs[:, :c]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    return emb / np.maximum(norms, 1e-12)


def baseline_cluster(g, method: str, num_speakers: int | None = None, seed: int = 0,
                     threshold: float = 0.5, n_init: int = 50) -> ClusterResult:
    from sklearn.cluster import KMeans, spectral_clustering

    sim = _sim_of(g)
    n = sim.shape[0]
    if method not in ("kmeans", "spectral", "ahc"):
        raise ClusteringError(f"unknown clustering method {method!r}")
    if method == "ahc":
        if n == 1:
            return ClusterResult(np.zeros(1, np.int64), 1)
        z = linkage(squareform(similarity_to_distance(sim), checks=False), method="average")
        # merging stops at the threshold: only links strictly below it are joined
        t = np.nextafter(threshold, -np.inf)
        labels = _relabel(fcluster(z, t=t, criterion="distance").astype(np.int64))
        return ClusterResult(labels, int(labels.max()) + 1)
    c = num_speakers if num_speakers is not None else count_speakers_eigengap(sim)
    c = max(1, min(int(c), n))
    if c == 1:
        return ClusterResult(np.zeros(n, np.int64), 1)
    if method == "kmeans":
        km = KMeans(n_clusters=c, init="k-means++", n_init=n_init, random_state=seed)
        raw = km.fit_predict(spectral_embedding(sim, c))
    else:
        raw = spectral_clustering(np.maximum(sim, 0.0), n_clusters=c, random_state=seed,
                                  assign_labels="discretize")
    labels = _relabel(np.asarray(raw, dtype=np.int64))
    return ClusterResult(labels, int(labels.max()) + 1)


METHODS = ("prism-hdbscan", "kmeans", "spectral", "ahc")


def cluster(g, method: str = "prism-hdbscan", k: int = 3, min_cluster_size: int = 2,
            seed: int = 0, threshold: float = 0.5) -> ClusterResult:
    """Cluster a similarity matrix (or graph) with any of :data:`METHODS`."""
    if not isinstance(g, SimilarityGraph):
        g = SimilarityGraph(g)
    if method == "prism-hdbscan":
        return hdbscan(g, k=k, min_cluster_size=min_cluster_size)
    return baseline_cluster(g, method, seed=seed, threshold=threshold)
