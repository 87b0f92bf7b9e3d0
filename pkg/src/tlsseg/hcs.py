"""Highly Connected Subgraphs clustering (Hartuv & Shamir).

A connected graph on n nodes is highly connected when its edge connectivity
exceeds n / 2. HCS returns such a graph as one cluster; otherwise it removes
a global minimum edge cut and recurses on both sides.
"""

import networkx as nx
import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin

from ._validation import check_count


def _min_cut(G):
    """Unit-capacity global minimum cut: (cut value, one side)."""
    H = nx.Graph()
    H.add_nodes_from(sorted(G.nodes))
    H.add_edges_from(sorted(tuple(sorted(e)) for e in G.edges), weight=1)
    value, (side, _) = nx.stoer_wagner(H)
    return value, set(side)


def highly_connected_subgraphs(G):
    """All HCS clusters of ``G`` (node sets), singletons included."""
    clusters = []
    stack = [sorted(c) for c in nx.connected_components(G)]
    stack.sort(key=lambda c: c[0], reverse=True)
    while stack:
        nodes = stack.pop()
        n = len(nodes)
        if n == 1:
            clusters.append(nodes)
            continue
        H = G.subgraph(nodes)
        value, side = _min_cut(H)
        if value > n / 2:
            clusters.append(nodes)
            continue
        for part in (sorted(side), sorted(set(nodes) - side)):
            sub = G.subgraph(part)
            stack.extend(sorted(sorted(c) for c in nx.connected_components(sub)))
    return sorted(clusters, key=lambda c: c[0])


def hcs_cluster(graph, min_support=3, w_min=1):
    """Cluster a :class:`~tlsseg.fusion.FusionGraph`.

    Edges with fewer than ``w_min`` supporters are removed first; clusters
    with fewer than ``min_support`` nodes are discarded. Returns
    ``(clusters, discarded)`` as lists of sorted node-index lists.
    """
    min_support = check_count(min_support, "min_support")
    G = nx.Graph()
    G.add_nodes_from(range(graph.n_nodes))
    G.add_edges_from(e for e, w in graph.weights.items() if w >= w_min)
    clusters, discarded = [], []
    for c in highly_connected_subgraphs(G):
        (clusters if len(c) >= min_support else discarded).append(c)
    return clusters, discarded


class HCSClustering(ClusterMixin, BaseEstimator):
    """HCS on a dense or sparse adjacency matrix; discarded nodes get label -1."""

    def __init__(self, min_support=1):
        self.min_support = min_support

    def fit(self, X, y=None):
        A = X.toarray() if hasattr(X, "toarray") else np.asarray(X)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"adjacency matrix must be square, got {A.shape}")
        G = nx.Graph()
        G.add_nodes_from(range(len(A)))
        rows, cols = np.nonzero(np.triu(A != 0, 1) | np.triu(A.T != 0, 1))
        G.add_edges_from(zip(rows.tolist(), cols.tolist()))
        labels = np.full(len(A), -1, dtype=np.int64)
        k = 0
        for c in highly_connected_subgraphs(G):
            if len(c) >= self.min_support:
                labels[c] = k
                k += 1
        self.labels_ = labels
        self.n_clusters_ = k
        return self
