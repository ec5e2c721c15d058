"""Circuit reconstruction from border observations.

Each cooperating jurisdiction pairs its incoming and outgoing connections by
timing (and size, when sizes vary) into partial circuits, accumulates
repeated hypotheses, and drops low-scoring ones. The coalition then chains
partial circuits that overlap in at least two consecutive nodes into
candidate circuits.

Partial circuits are kept in a canonical orientation (the node tuple that is
lexicographically smaller than its reverse) because forward and reply
traffic of one circuit describe the same path in opposite directions.
"""

from __future__ import annotations

import enum
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .errors import ConfigurationError
from .observer import ObservationLog, ObservedConnection
from .overlay import CaseLabel
from .simulator import LatencyModel, SizeMode

Evidence = tuple[float, int]  # (timestamp, size)

# Prune thresholds from `calibrate` on ten labelled runs per size mode
# (scale 0.1, six jurisdictions, base seed 1000).
CALIBRATED_THRESHOLDS = {
    SizeMode.FIXED: (2.1382, 4.5629),
    SizeMode.VARIABLE: (1.1111, 1.5180),
}

# Router pattern of a full circuit: user, three routers, server.
CIRCUIT_SHAPE = (0, 1, 1, 1, 0)
MAX_CIRCUIT_LEN = len(CIRCUIT_SHAPE)


@dataclass(frozen=True)
class ScoreParams:
    expected_delta: float = 0.105
    window: float = 0.09
    expected_delta_case5: float = 0.21
    window_case5: float = 0.09 * math.sqrt(2)
    size_tolerance: int = 0
    size_mode_aware: bool = False
    case4_unit: float = 1.0
    case5_unit: float = 0.5
    case4_threshold: float = CALIBRATED_THRESHOLDS[SizeMode.FIXED][0]
    case5_threshold: float = CALIBRATED_THRESHOLDS[SizeMode.FIXED][1]
    accept_threshold: float | None = None
    overlap_unit: float = 0.25

    def __post_init__(self):
        if self.window <= 0 or self.window_case5 <= 0:
            raise ConfigurationError("score windows must be positive")
        if self.expected_delta <= 0 or self.expected_delta_case5 <= 0:
            raise ConfigurationError("expected delays must be positive")
        if self.case5_threshold < self.case4_threshold:
            raise ConfigurationError("Case 5 threshold must be at least the Case 4 threshold")
        if self.size_tolerance < 0:
            raise ConfigurationError("size tolerance must be non-negative")

    @property
    def accept(self) -> float:
        return self.case4_threshold if self.accept_threshold is None else self.accept_threshold

    @classmethod
    def from_latency(cls, latency: LatencyModel, size_mode: SizeMode, **overrides) -> "ScoreParams":
        """Derive timing expectations from the latency statistics of the network."""
        one_hop = latency.median + latency.processing
        window = max(3.0 * latency.sigma * latency.median, 1e-3)
        case4, case5 = CALIBRATED_THRESHOLDS[size_mode]
        base = dict(
            case4_threshold=case4,
            case5_threshold=case5,
            expected_delta=one_hop,
            window=window,
            expected_delta_case5=2.0 * one_hop,
            window_case5=window * math.sqrt(2.0),
            size_mode_aware=size_mode is SizeMode.VARIABLE,
        )
        base.update(overrides)
        return cls(**base)

    def with_thresholds(self, case4: float, case5: float, accept: float | None = None) -> "ScoreParams":
        return replace(self, case4_threshold=case4, case5_threshold=max(case4, case5),
                       accept_threshold=accept)

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, doc: Mapping) -> "ScoreParams":
        return cls(**{k: v for k, v in doc.items() if k in cls.__dataclass_fields__})


def _canonical_link(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


@dataclass
class PartialCircuit:
    nodes: tuple[int, ...]
    sender_evidence: list[Evidence] = field(default_factory=list)
    receiver_evidence: list[Evidence] = field(default_factory=list)
    score: float = 0.0

    @property
    def sender(self) -> int:
        return self.nodes[0]

    @property
    def receiver(self) -> int:
        return self.nodes[-1]

    @property
    def intermediates(self) -> tuple[int, ...]:
        return self.nodes[1:-1]

    def canonical(self) -> "PartialCircuit":
        rev = self.nodes[::-1]
        if rev < self.nodes:
            return PartialCircuit(rev, self.receiver_evidence, self.sender_evidence, self.score)
        return self

    def link_evidence(self) -> dict[tuple[int, int], list[Evidence]]:
        """Evidence keyed by the (unordered) edge link it was observed on."""
        first = _canonical_link(self.nodes[0], self.nodes[1])
        last = _canonical_link(self.nodes[-2], self.nodes[-1])
        if first == last:
            return {first: self.sender_evidence}
        return {first: self.sender_evidence, last: self.receiver_evidence}


class Verdict(enum.Enum):
    ASSUMED_REAL = "assumed_real"
    ASSUMED_IMAGINED = "assumed_imagined"


@dataclass(frozen=True)
class CandidateCircuit:
    nodes: tuple[int, ...]
    score: float
    verdict: Verdict
    evidence_count: int = 0
    parts: int = 1

    def to_json(self) -> dict:
        return {
            "nodes": list(self.nodes),
            "score": self.score,
            "verdict": self.verdict.value,
            "evidence_count": self.evidence_count,
            "parts": self.parts,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "CandidateCircuit":
        return cls(tuple(doc["nodes"]), doc["score"], Verdict(doc["verdict"]),
                   doc.get("evidence_count", 0), doc.get("parts", 1))


def _log(log) -> ObservationLog:
    return log if isinstance(log, ObservationLog) else ObservationLog(-1, list(log))


def _endpoint_mask(cols) -> np.ndarray:
    out = cols["outgoing"]
    return (out & (cols["case"] == CaseLabel.CASE1)) | (~out & (cols["case"] == CaseLabel.CASE2))


def _take(cols, mask) -> dict[str, np.ndarray]:
    return {k: v[mask] for k, v in cols.items()}


def extract_endpoints(log) -> tuple[list[PartialCircuit], ObservationLog | list]:
    """Split off connections whose inner node is a user or server.

    Those are outgoing Case 1 and incoming Case 2 connections; each becomes a
    two-node partial circuit. The remainder is returned in the same container
    type as the input.
    """
    obs = _log(log)
    cols = obs.columns
    mask = _endpoint_mask(cols)
    ep = _take(cols, mask)
    endpoints = []
    for a, b, t, z in zip(ep["sender"].tolist(), ep["receiver"].tolist(),
                          ep["timestamp"].tolist(), ep["size"].tolist()):
        endpoints.append(PartialCircuit((a, b), [(t, z)], [(t, z)], 0.0))
    rest = ObservationLog(obs.jurisdiction, columns=_take(cols, ~mask))
    if isinstance(log, ObservationLog):
        return endpoints, rest
    return endpoints, rest.connections


def score_pair(incoming: ObservedConnection, outgoing: ObservedConnection,
               p: ScoreParams) -> float | None:
    """Triangular timing kernel for one incoming/outgoing pair.

    A shared inner node (Case 4) is scored against the one-hop expectation,
    otherwise (Case 5) against the two-hop one. ``None`` means the pair cannot
    belong to the same packet.
    """
    delta = outgoing.timestamp - incoming.timestamp
    if delta <= 0:
        return None
    if p.size_mode_aware and abs(incoming.size - outgoing.size) > p.size_tolerance:
        return None
    if outgoing.sender == incoming.receiver:
        mu, w, unit = p.expected_delta, p.window, p.case4_unit
    else:
        mu, w, unit = p.expected_delta_case5, p.window_case5, p.case5_unit
    off = abs(delta - mu)
    if off > w:
        return None
    return unit * (1.0 - off / w)


def _sorted_side(cols, mask):
    """Rows selected by ``mask`` ordered by (timestamp, sender, receiver, size)."""
    rows = np.flatnonzero(mask)
    order = np.lexsort((cols["size"][rows], cols["receiver"][rows], cols["sender"][rows],
                        cols["timestamp"][rows]))
    return _take(cols, rows[order])


def _match(cols, p: ScoreParams, counter: Counter | None):
    """Vectorised core of :func:`match_connections`.

    Returns the sorted incoming and outgoing columns and the matched
    ``(incoming row, outgoing row, score)`` lists.
    """
    out_flag, case = cols["outgoing"], cols["case"]
    inc = _sorted_side(cols, ~out_flag & (case != CaseLabel.CASE2))
    out = _sorted_side(cols, out_flag & (case != CaseLabel.CASE1))
    n_in, n_out = len(inc["timestamp"]), len(out["timestamp"])
    none = (inc, out, [], [], [])
    if not n_in or not n_out:
        return none
    t_in, s_in, r_in, z_in, k_in = (inc[k] for k in ("timestamp", "sender", "receiver", "size", "case"))
    t_out, s_out, r_out, z_out, k_out = (out[k] for k in ("timestamp", "sender", "receiver", "size", "case"))

    lo_off = min(p.expected_delta - p.window, p.expected_delta_case5 - p.window_case5)
    hi_off = max(p.expected_delta + p.window, p.expected_delta_case5 + p.window_case5)
    lo = np.searchsorted(t_out, t_in + lo_off, side="left")
    hi = np.searchsorted(t_out, t_in + hi_off, side="right")
    counts = np.maximum(hi - lo, 0)
    total = int(counts.sum())
    if total == 0:
        return none
    # Every (incoming, outgoing) pair inside the scan range.
    ii = np.repeat(np.arange(n_in), counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    jj = np.arange(total) - starts + np.repeat(lo, counts)

    common = s_out[jj] == r_in[ii]
    valid = r_out[jj] != s_in[ii]
    valid &= ~((k_in[ii] == CaseLabel.CASE1) & (k_out[jj] == CaseLabel.CASE2))
    valid &= ~(~common & (k_in[ii] == CaseLabel.CASE3) & (k_out[jj] == CaseLabel.CASE3))
    ii, jj, common = ii[valid], jj[valid], common[valid]
    if counter is not None:
        counter["score_pair"] += len(ii)

    # Same arithmetic as score_pair, one pair per element.
    delta = t_out[jj] - t_in[ii]
    mu = np.where(common, p.expected_delta, p.expected_delta_case5)
    w = np.where(common, p.window, p.window_case5)
    unit = np.where(common, p.case4_unit, p.case5_unit)
    off = np.abs(delta - mu)
    ok = (delta > 0) & (off <= w)
    if p.size_mode_aware:
        ok &= np.abs(z_in[ii] - z_out[jj]) <= p.size_tolerance
    score = unit * (1.0 - off / w)
    ok &= score > 0
    ii, jj, score = ii[ok], jj[ok], score[ok]
    if len(ii) == 0:
        return none

    # Per incoming: best score first, then earliest outgoing (sorted order).
    order = np.lexsort((jj, -score, ii))
    ii, jj, score = ii[order], jj[order], score[order]
    group_start = np.flatnonzero(np.r_[True, ii[1:] != ii[:-1]])
    group_end = np.r_[group_start[1:], len(ii)].tolist()
    ii, jj, score = ii.tolist(), jj.tolist(), score.tolist()
    claimed = bytearray(n_out)
    m_in, m_out, m_score = [], [], []
    for k, end in zip(group_start.tolist(), group_end):
        while k < end and claimed[jj[k]]:
            k += 1
        if k == end:
            continue
        j = jj[k]
        claimed[j] = 1
        m_in.append(ii[k])
        m_out.append(j)
        m_score.append(score[k])
    return inc, out, m_in, m_out, m_score


def _matched_rows(cols, p: ScoreParams, counter: Counter | None):
    """Matched pairs as parallel lists: nodes, incoming evidence, outgoing evidence, score."""
    inc, out, m_in, m_out, score = _match(cols, p, counter)
    if not m_in:
        return []
    a = inc["sender"][m_in].tolist()
    b = inc["receiver"][m_in].tolist()
    c = out["sender"][m_out].tolist()
    d = out["receiver"][m_out].tolist()
    ev_in = list(zip(inc["timestamp"][m_in].tolist(), inc["size"][m_in].tolist()))
    ev_out = list(zip(out["timestamp"][m_out].tolist(), out["size"][m_out].tolist()))
    nodes = [(w, x, z) if x == y else (w, x, y, z) for w, x, y, z in zip(a, b, c, d)]
    return list(zip(nodes, ev_in, ev_out, score))


def match_connections(log, p: ScoreParams, counter: Counter | None = None) -> list[PartialCircuit]:
    """Greedy one-to-one timing match of incoming to outgoing connections.

    Incoming connections are handled in time order; each takes the unclaimed
    outgoing connection with the highest :func:`score_pair` value (ties go to
    the earliest outgoing timestamp, then the lowest node id). Pairs whose
    joined path could not sit inside a user-three-routers-server circuit are
    never considered. ``counter['score_pair']`` accumulates the number of
    kernel evaluations.
    """
    return [PartialCircuit(nodes, [e_in], [e_out], s)
            for nodes, e_in, e_out, s in _matched_rows(_log(log).columns, p, counter)]


def accumulate(partials: Iterable[PartialCircuit], dedupe: bool = False) -> list[PartialCircuit]:
    """Merge partial circuits with identical paths: evidence joined, scores added."""
    merged: dict[tuple[int, ...], PartialCircuit] = {}
    for part in partials:
        part = part.canonical()
        cur = merged.get(part.nodes)
        if cur is None:
            merged[part.nodes] = PartialCircuit(part.nodes, list(part.sender_evidence),
                                                list(part.receiver_evidence), part.score)
        else:
            cur.sender_evidence.extend(part.sender_evidence)
            cur.receiver_evidence.extend(part.receiver_evidence)
            cur.score += part.score
    out = []
    for nodes in sorted(merged):
        part = merged[nodes]
        if dedupe:
            part.sender_evidence = sorted(set(part.sender_evidence))
            part.receiver_evidence = sorted(set(part.receiver_evidence))
        else:
            part.sender_evidence.sort()
            part.receiver_evidence.sort()
        out.append(part)
    return out


def threshold_for(part: PartialCircuit, p: ScoreParams) -> float:
    return p.case4_threshold if len(part.nodes) == 3 else p.case5_threshold


def prune(partials: Iterable[PartialCircuit], p: ScoreParams) -> list[PartialCircuit]:
    """Drop matched partials whose score is below their case threshold.

    Two-node endpoint partials carry no score and always pass.
    """
    kept = []
    for part in partials:
        if len(part.nodes) == 2 or (part.score > 0 and part.score >= threshold_for(part, p)):
            kept.append(part)
    return kept


def shape_ok(nodes: tuple[int, ...], routers: set[int] | None) -> bool:
    """True if ``nodes`` is a repeat-free window of a user-OR-OR-OR-server path."""
    n = len(nodes)
    if n < 2 or n > MAX_CIRCUIT_LEN or len(set(nodes)) != n:
        return False
    if routers is None:
        return True
    pattern = tuple(int(x in routers) for x in nodes)
    return any(CIRCUIT_SHAPE[i:i + n] == pattern for i in range(MAX_CIRCUIT_LEN - n + 1))


def canonical_nodes(nodes: tuple[int, ...]) -> tuple[int, ...]:
    rev = nodes[::-1]
    return rev if rev < nodes else nodes


def matched_evidence(a: list[Evidence], b: list[Evidence], time_tol: float, size_tol: int) -> int:
    """Size of a one-to-one pairing of evidence entries that agree within tolerance."""
    if not a or not b:
        return 0
    if size_tol == 0:
        groups_a: dict[int, list[float]] = defaultdict(list)
        groups_b: dict[int, list[float]] = defaultdict(list)
        for t, s in a:
            groups_a[s].append(t)
        for t, s in b:
            groups_b[s].append(t)
        total = 0
        for size, ta in groups_a.items():
            tb = groups_b.get(size)
            if tb:
                total += _pair_times(sorted(ta), sorted(tb), time_tol)
        return total
    # With a size tolerance the compatibility graph is no longer an interval
    # graph, so a greedy sweep can miss pairs; use a maximum bipartite matching.
    ta, sa = np.array(a, dtype=float).T
    tb, sb = np.array(b, dtype=float).T
    ok = (np.abs(ta[:, None] - tb[None, :]) <= time_tol) & (np.abs(sa[:, None] - sb[None, :]) <= size_tol)
    if not ok.any():
        return 0
    match = maximum_bipartite_matching(csr_matrix(ok), perm_type="column")
    return int((match >= 0).sum())


def _pair_times(ta: list[float], tb: list[float], tol: float) -> int:
    i = j = count = 0
    while i < len(ta) and j < len(tb):
        d = ta[i] - tb[j]
        if -tol <= d <= tol:
            count += 1
            i += 1
            j += 1
        elif d < 0:
            i += 1
        else:
            j += 1
    return count


def windows(nodes: tuple[int, ...], min_len: int = 2):
    """Every contiguous sub-sequence of ``nodes`` with at least ``min_len`` nodes."""
    n = len(nodes)
    for length in range(min_len, n + 1):
        for start in range(n - length + 1):
            yield nodes[start:start + length]


def assemble(pool: Mapping[tuple[int, ...], PartialCircuit],
             routers: set[int] | None) -> set[tuple[int, ...]]:
    """Closure of the partial paths under overlap joins (canonical tuples)."""
    by_prefix: dict[tuple[int, ...], list[tuple[int, ...]]] = defaultdict(list)
    for nodes in pool:
        for oriented in {nodes, nodes[::-1]}:
            for k in range(2, len(oriented)):
                by_prefix[oriented[:k]].append(oriented)
    for v in by_prefix.values():
        v.sort()

    seen = set(pool)
    frontier = sorted(pool)
    while frontier:
        nxt = []
        for seq in frontier:
            for oriented in (seq, seq[::-1]):
                for k in range(2, len(oriented) + 1):
                    for q in by_prefix.get(oriented[-k:], ()):
                        joined = oriented + q[k:]
                        if not shape_ok(joined, routers):
                            continue
                        key = canonical_nodes(joined)
                        if key not in seen:
                            seen.add(key)
                            nxt.append(key)
        frontier = sorted(nxt)
    return seen


def score_candidate(nodes: tuple[int, ...], pool: Mapping[tuple[int, ...], PartialCircuit],
                    p: ScoreParams) -> tuple[float, int, int]:
    """Score, distinct evidence count and part count of an assembled path.

    The score is the sum of the scores of every partial circuit lying on the
    path, plus ``overlap_unit`` for each evidence entry shared by two of those
    partials on a common edge link.
    """
    parts = [pool[w] for w in {canonical_nodes(w) for w in windows(nodes)} if w in pool]
    parts.sort(key=lambda q: q.nodes)
    total = sum(q.score for q in parts)
    link_ev = [q.link_evidence() for q in parts]
    shared = 0
    for i in range(len(parts)):
        for j in range(i + 1, len(parts)):
            for link, ev in link_ev[i].items():
                other = link_ev[j].get(link)
                if other:
                    shared += matched_evidence(ev, other, p.window, p.size_tolerance)
    distinct = {(link, e) for le in link_ev for link, ev in le.items() for e in ev}
    return total + p.overlap_unit * shared, len(distinct), len(parts)


def merge_overlapping(all_partials: Iterable[PartialCircuit], p: ScoreParams,
                      routers: set[int] | None = None) -> list[CandidateCircuit]:
    """Chain overlapping partial circuits into maximal candidate circuits.

    Two paths join when the tail of one equals the head of the other over at
    least two nodes and the result still fits the circuit shape. Every
    maximal assembled path (not a window of another one) is a candidate.
    ``routers`` is the set of known onion routers used for the shape check.
    """
    pool = {q.nodes: q for q in accumulate(all_partials, dedupe=True)}
    assembled = assemble(pool, routers)
    covered = set()
    for seq in assembled:
        for w in windows(seq):
            if len(w) < len(seq):
                covered.add(canonical_nodes(w))
    out = []
    for seq in sorted(assembled - covered):
        score, n_ev, n_parts = score_candidate(seq, pool, p)
        verdict = Verdict.ASSUMED_REAL if score >= p.accept else Verdict.ASSUMED_IMAGINED
        out.append(CandidateCircuit(seq, score, verdict, n_ev, n_parts))
    return out


def routers_seen(logs: Mapping[int, ObservationLog] | Iterable[ObservationLog]) -> set[int]:
    """Onion routers identifiable from case labels (all routers are public)."""
    values = logs.values() if isinstance(logs, Mapping) else logs
    routers = set()
    for log in values:
        cols = _log(log).columns
        case = cols["case"]
        routers.update(np.unique(cols["receiver"][case != CaseLabel.CASE2]).tolist())
        routers.update(np.unique(cols["sender"][case != CaseLabel.CASE1]).tolist())
    return routers


def _endpoint_partials(cols) -> list[PartialCircuit]:
    """Accumulated endpoint partials of one log."""
    ep = _take(cols, _endpoint_mask(cols))
    a, b = ep["sender"], ep["receiver"]
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    grouped: dict[tuple[int, int], list[Evidence]] = defaultdict(list)
    for x, y, t, z in zip(lo.tolist(), hi.tolist(), ep["timestamp"].tolist(), ep["size"].tolist()):
        grouped[(x, y)].append((t, z))
    endpoints = []
    for nodes in sorted(grouped):
        ev = sorted(grouped[nodes])
        endpoints.append(PartialCircuit(nodes, ev, list(ev), 0.0))
    return endpoints


def jurisdiction_partials(log, p: ScoreParams, counter: Counter | None = None):
    """Per-jurisdiction phase: (endpoint partials, accumulated matched partials).

    Equivalent to ``accumulate`` over :func:`extract_endpoints` and
    :func:`match_connections`, without materialising one object per match.
    """
    cols = _log(log).columns
    endpoints = _endpoint_partials(cols)
    rest = _take(cols, ~_endpoint_mask(cols))
    merged: dict[tuple[int, ...], PartialCircuit] = {}
    for nodes, first, last, s in _matched_rows(rest, p, counter):
        rev = nodes[::-1]
        if rev < nodes:
            nodes, first, last = rev, last, first
        cur = merged.get(nodes)
        if cur is None:
            merged[nodes] = PartialCircuit(nodes, [first], [last], s)
        else:
            cur.sender_evidence.append(first)
            cur.receiver_evidence.append(last)
            cur.score += s
    matched = []
    for nodes in sorted(merged):
        part = merged[nodes]
        part.sender_evidence.sort()
        part.receiver_evidence.sort()
        matched.append(part)
    return endpoints, matched


def reconstruct(logs: Mapping[int, ObservationLog], p: ScoreParams,
                counter: Counter | None = None,
                routers: set[int] | None = None) -> list[CandidateCircuit]:
    """Full pipeline over the coalition's logs."""
    if routers is None:
        routers = routers_seen(logs)
    pool: list[PartialCircuit] = []
    for j in sorted(logs):
        endpoints, matched = jurisdiction_partials(logs[j], p, counter)
        pool.extend(endpoints)
        pool.extend(prune(matched, p))
    return merge_overlapping(pool, p, routers)
