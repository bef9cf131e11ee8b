"""Brute-force reference computations, deliberately naive and independent of the package."""

import itertools
import math


def all_simple_paths(adj, a, b):
    """Every simple directed path from a to b; adj maps node -> iterable of successors."""
    out = []

    def walk(path):
        u = path[-1]
        if u == b:
            out.append(list(path))
            return
        for v in adj.get(u, ()):
            if v not in path:
                path.append(v)
                walk(path)
                path.pop()

    walk([a])
    return out


def brute_shortest(positions, adj, a, b):
    if a == b:
        return 0.0
    best = math.inf
    for path in all_simple_paths(adj, a, b):
        best = min(best, sum(math.dist(positions[u], positions[v]) for u, v in zip(path, path[1:])))
    return best


def brute_dtw(dist, reference, query):
    """Minimum cost over every monotone alignment path from (0, 0) to (n-1, m-1)."""
    n, m = len(reference), len(query)
    best = math.inf

    def walk(i, j, acc):
        nonlocal best
        acc += dist(reference[i], query[j])
        if i == n - 1 and j == m - 1:
            best = min(best, acc)
            return
        if i + 1 < n:
            walk(i + 1, j, acc)
        if j + 1 < m:
            walk(i, j + 1, acc)
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, acc)

    walk(0, 0, 0.0)
    return best


def brute_select(outcomes):
    """outcomes: list over candidates of (tfv_bools, mev_rows). Returns the winning index.

    Highest total passes; among those the most true/false passes; then the lowest index.
    """
    totals = []
    for tfv, rows in outcomes:
        t = len([x for x in tfv if x])
        m = len([x for row in rows for x in row if x])
        totals.append((t + m, t))
    top = max(s for s, _ in totals)
    tied = [k for k, (s, _) in enumerate(totals) if s == top]
    top_tfv = max(totals[k][1] for k in tied)
    tied = [k for k in tied if totals[k][1] == top_tfv]
    return tied[0]


def bit_patterns(n):
    return itertools.product((False, True), repeat=n)
