"""Brute-force reference implementations used by the unit and acceptance tests."""

from functools import lru_cache
from itertools import combinations, permutations

import numpy as np


def triangle_weights(n, edges):
    """w_ij = number of l with (i,l) and (j,l) both edges, by enumeration."""
    adj = {frozenset(e) for e in edges}
    return {(i, j): sum(1 for l in range(n) if l not in (i, j) and frozenset((i, l)) in adj and frozenset((j, l)) in adj)
            for i, j in edges}


def _components(nodes, adj):
    nodes, out = set(nodes), []
    while nodes:
        stack, comp = [min(nodes)], set()
        while stack:
            v = stack.pop()
            if v in comp:
                continue
            comp.add(v)
            stack.extend(u for u in adj[v] if u in nodes and u not in comp)
        nodes -= comp
        out.append(frozenset(comp))
    return out


def _min_cuts(nodes, adj):
    """(value, all minimum-cut sides containing the smallest node) by subset enumeration."""
    nodes = sorted(nodes)
    first, rest = nodes[0], nodes[1:]
    best, sides = None, []
    for r in range(0, len(rest)):
        for extra in combinations(rest, r):
            side = {first, *extra}
            value = sum(1 for v in side for u in adj[v] if u in nodes and u not in side)
            if best is None or value < best:
                best, sides = value, [frozenset(side)]
            elif value == best:
                sides.append(frozenset(side))
    return best, sides


def hcs_outcomes(n, edges):
    """Every partition HCS may return, over all choices among tied minimum cuts."""
    adj = {v: set() for v in range(n)}
    for i, j in edges:
        adj[i].add(j)
        adj[j].add(i)

    @lru_cache(maxsize=None)
    def connected(nodes):
        if len(nodes) == 1:
            return {frozenset([nodes])}
        value, sides = _min_cuts(nodes, adj)
        if value > len(nodes) / 2:
            return {frozenset([nodes])}
        results = set()
        for side in sides:
            for left in solve(side):
                for right in solve(nodes - side):
                    results.add(left | right)
        return results

    def solve(nodes):
        parts = [connected(c) for c in _components(nodes, adj)]
        results = {frozenset()}
        for options in parts:
            results = {r | o for r in results for o in options}
        return results

    return solve(frozenset(range(n)))


def _all_injections(n_small, n_large):
    return np.array(list(permutations(range(n_large), n_small)), dtype=np.int64).reshape(-1, n_small)


def best_assignment(D, d_tau):
    """Maximum gated matching with minimum total distance, by exhaustive search.

    Returns (pair count, total distance, frozenset of (prediction k, reference j)).
    """
    D = np.asarray(D, dtype=np.float64)
    transposed = D.shape[0] > D.shape[1]
    M = D.T if transposed else D  # rows are the smaller side
    n_small, n_large = M.shape
    if n_small == 0:
        return 0, 0.0, frozenset()
    P = _all_injections(n_small, n_large)
    rows = np.arange(n_small)
    d = M[rows, P]
    allowed = d <= d_tau
    count = allowed.sum(axis=1)
    total = np.where(allowed, d, 0.0).sum(axis=1)
    best = np.lexsort((total, -count))[0]
    pairs = set()
    for r in rows[allowed[best]]:
        j, k = (int(P[best, r]), int(r)) if transposed else (int(r), int(P[best, r]))
        pairs.add((k, j))
    return int(count[best]), float(total[best]), frozenset(pairs)


def random_graph(rng, n, p):
    return [(i, j) for i, j in combinations(range(n), 2) if rng.random() < p]


def monte_carlo_iou(a, b, n=1_000_000, seed=0):
    """IoU from uniform samples in a's box: |a∩b| = vol(a) * fraction of samples inside b."""
    rng = np.random.default_rng(seed)
    local = rng.uniform(-1, 1, size=(n, 3)) * a.half_extents
    pts = a.center + local @ a.axes.T
    inside = ((np.abs((pts - b.center) @ b.axes) <= b.half_extents).all(axis=1)).mean()
    inter = a.volume * inside
    return inter / (a.volume + b.volume - inter)
