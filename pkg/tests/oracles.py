"""Slow, independent re-implementations used as test oracles."""

from __future__ import annotations

import networkx as nx

from borderwatch.observer import Direction
from borderwatch.overlay import CaseLabel
from borderwatch.reconstructor import score_pair

SHAPE = (0, 1, 1, 1, 0)


def naive_match(connections, p):
    """Scalar greedy matcher: incoming in time order, best unclaimed outgoing wins."""
    def key(c):
        return (c.timestamp, c.sender, c.receiver, c.size)

    inc = sorted((c for c in connections
                  if c.direction is Direction.INCOMING and c.case is not CaseLabel.CASE2), key=key)
    out = sorted((c for c in connections
                  if c.direction is Direction.OUTGOING and c.case is not CaseLabel.CASE1), key=key)
    claimed = set()
    result = []
    for a in inc:
        best = None
        for j, b in enumerate(out):
            if j in claimed or b.receiver == a.sender:
                continue
            if a.case is CaseLabel.CASE1 and b.case is CaseLabel.CASE2:
                continue
            if b.sender != a.receiver and a.case is CaseLabel.CASE3 and b.case is CaseLabel.CASE3:
                continue
            s = score_pair(a, b, p)
            if s is None or s <= 0:
                continue
            if best is None or s > best[0]:
                best = (s, j)
        if best is None:
            continue
        s, j = best
        claimed.add(j)
        b = out[j]
        nodes = (a.sender, a.receiver) + ((b.receiver,) if b.sender == a.receiver
                                          else (b.sender, b.receiver))
        result.append((nodes, (a.timestamp, a.size), (b.timestamp, b.size), s))
    return result


def max_pairing(a, b, time_tol, size_tol):
    """Maximum one-to-one pairing of evidence entries, by bipartite matching."""
    g = nx.Graph()
    left = [("a", i) for i in range(len(a))]
    g.add_nodes_from(left)
    g.add_nodes_from(("b", j) for j in range(len(b)))
    for i, (t1, s1) in enumerate(a):
        for j, (t2, s2) in enumerate(b):
            if abs(t1 - t2) <= time_tol and abs(s1 - s2) <= size_tol:
                g.add_edge(("a", i), ("b", j))
    return len(nx.bipartite.maximum_matching(g, top_nodes=left)) // 2


def _canon(nodes):
    return min(tuple(nodes), tuple(nodes)[::-1])


def _shape_fits(seq, routers):
    pat = tuple(int(x in routers) for x in seq)
    return any(SHAPE[i:i + len(seq)] == pat for i in range(len(SHAPE) - len(seq) + 1))


def _chain_covers(seq, pool_keys):
    """Can windows of ``seq`` that are pool paths be chained (overlap >= 2) over all of it?"""
    n = len(seq)
    iv = [(i, j) for i in range(n) for j in range(i + 1, n)
          if _canon(seq[i:j + 1]) in pool_keys]
    for start in iv:
        seen = {start}
        stack = [start]
        while stack:
            lo, hi = stack.pop()
            if (lo, hi) == (0, n - 1):
                return True
            for c, d in iv:
                right = lo <= c <= hi - 1 and d > hi
                left = lo + 1 <= d <= hi and c < lo
                if right or left:
                    nxt = (lo, d) if right else (c, hi)
                    if nxt not in seen:
                        seen.add(nxt)
                        stack.append(nxt)
    return False


def brute_force_candidates(pool_keys, routers):
    """All maximal assemblable paths, found by walking the link graph exhaustively."""
    g = nx.Graph()
    for nodes in pool_keys:
        nx.add_path(g, nodes)
    found = set()
    for src in g.nodes:
        for dst in g.nodes:
            if src >= dst:
                continue
            for path in nx.all_simple_paths(g, src, dst, cutoff=4):
                seq = tuple(path)
                if _shape_fits(seq, routers) and _chain_covers(seq, pool_keys):
                    found.add(_canon(seq))
    found |= {k for k in pool_keys}
    sub = set()
    for seq in found:
        for i in range(len(seq)):
            for j in range(i + 2, len(seq) + 1):
                if j - i < len(seq):
                    sub.add(_canon(seq[i:j]))
    return found - sub


def brute_force_score(seq, pool, time_tol, size_tol, overlap_unit):
    parts = [pool[k] for k in {_canon(seq[i:j]) for i in range(len(seq))
                               for j in range(i + 2, len(seq) + 1)} if k in pool]
    total = sum(q.score for q in parts)
    shared = 0
    for x in range(len(parts)):
        for y in range(x + 1, len(parts)):
            ex, ey = parts[x].link_evidence(), parts[y].link_evidence()
            for link in set(ex) & set(ey):
                shared += max_pairing(ex[link], ey[link], time_tol, size_tol)
    return total + overlap_unit * shared
