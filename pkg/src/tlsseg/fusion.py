"""Multi-view label fusion: kNN/IoU box graph, supporter weights, HCS, merge."""

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ParameterError, check_count, check_positive, check_unit_interval
from .hcs import hcs_cluster
from .instances import Instance, InstanceSet
from .obb import obb_iou
from .scan_io import voxel_downsample

logger = logging.getLogger(__name__)


@dataclass
class FusionGraph:
    n_nodes: int
    knn_edges: set = field(default_factory=set)
    ious: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    @property
    def edges(self):
        return set(self.weights)

    def adjacency(self):
        A = sparse.lil_matrix((self.n_nodes, self.n_nodes), dtype=np.int8)
        for i, j in self.weights:
            A[i, j] = A[j, i] = 1
        return A.tocsr()


def knn_candidates(centers, k, mode="union"):
    """Unordered node pairs from k nearest centroid neighbours."""
    n = len(centers)
    if n < 2:
        return set()
    k_eff = min(k, n - 1)
    _, nbr = cKDTree(centers).query(centers, k=k_eff + 1)
    directed = set()
    for i, row in enumerate(np.atleast_2d(nbr)):
        row = [int(j) for j in row if j != i][:k_eff]
        directed.update((i, j) for j in row)
    if mode == "union":
        return {(min(i, j), max(i, j)) for i, j in directed}
    if mode == "mutual":
        return {(i, j) for i, j in directed if i < j and (j, i) in directed}
    raise ParameterError(f"unknown kNN symmetrisation {mode!r}")


def supporter_weights(n_nodes, edges):
    """Number of common neighbours (triangles through the edge) per edge."""
    if not edges:
        return {}
    i, j = np.array(sorted(edges)).T
    A = sparse.csr_matrix((np.ones(2 * len(i)), (np.r_[i, j], np.r_[j, i])), shape=(n_nodes, n_nodes))
    common = A @ A
    return {(int(a), int(b)): int(common[a, b]) for a, b in zip(i, j)}


def build_graph(instances, k, tau, knn_mode="union"):
    """Edges = kNN candidates (by box centroid) whose box IoU reaches ``tau``."""
    k = check_count(k, "k")
    tau = check_unit_interval(tau, "tau")
    n = len(instances)
    graph = FusionGraph(n)
    if n < 2:
        return graph
    centers = np.array([p.obb.center for p in instances])
    graph.knn_edges = knn_candidates(centers, k, knn_mode)
    for i, j in sorted(graph.knn_edges):
        graph.ious[(i, j)] = obb_iou(instances[i].obb, instances[j].obb)
    pruned = {e for e, v in graph.ious.items() if v >= tau}
    graph.weights = supporter_weights(n, pruned)
    return graph


def _majority_class(members):
    votes = Counter(p.class_label for p in members)
    conf = Counter()
    for p in members:
        conf[p.class_label] += p.confidence
    return min(votes, key=lambda c: (-votes[c], -conf[c], c))


def merge_cluster_instances(clusters, instances, d_p, first_id=0):
    """Unite the partial instances of each cluster and resample to ``d_p``."""
    d_p = check_positive(d_p, "d_p")
    merged = []
    for offset, cluster in enumerate(clusters):
        members = [instances[i] for i in cluster]
        xyz = voxel_downsample(np.concatenate([m.xyz for m in members]), d_p).xyz
        merged.append(Instance(
            first_id + offset, _majority_class(members), xyz,
            support_count=len(members),
            score=float(np.mean([m.confidence for m in members])),
        ))
    return InstanceSet(merged)


class MultiViewFusion(ClusterMixin, BaseEstimator):
    """Fuse single-view partial instances into merged 3D instances.

    ``fit`` takes a list of :class:`~tlsseg.instances.PartialInstance` and
    sets ``graph_``, ``clusters_``, ``discarded_``, ``labels_`` (cluster id
    per partial instance, -1 when discarded) and ``instances_``.
    ``k=None`` uses the number of distinct stations among the inputs.
    """

    def __init__(self, k=None, tau=0.15, w_min=1, min_support=3, d_p=0.003, knn_mode="union"):
        self.k = k
        self.tau = tau
        self.w_min = w_min
        self.min_support = min_support
        self.d_p = d_p
        self.knn_mode = knn_mode

    def fit(self, X, y=None):
        partials = list(X)
        k = self.k if self.k is not None else max(1, len({p.station_id for p in partials}))
        self.k_ = k
        self.graph_ = build_graph(partials, k, self.tau, self.knn_mode)
        self.clusters_, self.discarded_ = hcs_cluster(self.graph_, self.min_support, self.w_min)
        labels = np.full(len(partials), -1, dtype=np.int64)
        for cid, cluster in enumerate(self.clusters_):
            labels[cluster] = cid
        self.labels_ = labels
        self.instances_ = merge_cluster_instances(self.clusters_, partials, self.d_p)
        logger.info("fusion: %d partial instances, %d edges, %d clusters (%d nodes discarded)",
                    len(partials), len(self.graph_.weights), len(self.clusters_),
                    sum(len(c) for c in self.discarded_))
        return self

    def transform(self, X=None):
        check_is_fitted(self, "instances_")
        return self.instances_
