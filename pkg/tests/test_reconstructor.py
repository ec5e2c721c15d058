import math
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from borderwatch.errors import ConfigurationError
from borderwatch.harness import routers_of, score_params_for
from borderwatch.observer import Direction, ObservationLog, ObservedConnection, partition_trace
from borderwatch.overlay import CaseLabel
from borderwatch.reconstructor import (CALIBRATED_THRESHOLDS, CandidateCircuit, PartialCircuit,
                                       ScoreParams, Verdict, accumulate, canonical_nodes,
                                       extract_endpoints, jurisdiction_partials, match_connections,
                                       matched_evidence, merge_overlapping, prune, reconstruct,
                                       routers_seen, score_pair, shape_ok, windows)
from borderwatch.simulator import LatencyModel, SizeMode

from oracles import brute_force_candidates, brute_force_score, max_pairing, naive_match

IN, OUT = Direction.INCOMING, Direction.OUTGOING
C1, C2, C3 = CaseLabel.CASE1, CaseLabel.CASE2, CaseLabel.CASE3
P = ScoreParams(expected_delta=0.1, window=0.05, expected_delta_case5=0.2, window_case5=0.07)


def conn(s, r, t, d, case, size=512):
    return ObservedConnection(s, r, t, size, d, case)


def test_score_pair_kernel():
    a = conn(1, 2, 1.0, IN, C3)
    assert score_pair(a, conn(2, 3, 1.1, OUT, C3), P) == pytest.approx(1.0)
    assert score_pair(a, conn(2, 3, 1.125, OUT, C3), P) == pytest.approx(0.5)
    assert score_pair(a, conn(2, 3, 1.2, OUT, C3), P) is None
    assert score_pair(a, conn(2, 3, 0.9, OUT, C3), P) is None
    # no shared node: two-hop expectation, half unit
    assert score_pair(a, conn(5, 3, 1.2, OUT, C3), P) == pytest.approx(0.5)


def test_score_pair_sizes():
    p = ScoreParams(size_mode_aware=True)
    a = conn(1, 2, 1.0, IN, C3, size=300)
    assert score_pair(a, conn(2, 3, 1.0 + p.expected_delta, OUT, C3, size=301), p) is None
    assert score_pair(a, conn(2, 3, 1.0 + p.expected_delta, OUT, C3, size=300), p) > 0


def test_score_params_validation():
    with pytest.raises(ConfigurationError):
        ScoreParams(window=0)
    with pytest.raises(ConfigurationError):
        ScoreParams(case4_threshold=3.0, case5_threshold=2.0)
    with pytest.raises(ConfigurationError):
        ScoreParams(size_tolerance=-1)
    with pytest.raises(ConfigurationError):
        ScoreParams(expected_delta=0)


def test_from_latency():
    p = ScoreParams.from_latency(LatencyModel(0.1, 0.3, 0.005), SizeMode.VARIABLE)
    assert p.expected_delta == pytest.approx(0.105)
    assert p.expected_delta_case5 == pytest.approx(0.21)
    assert p.window == pytest.approx(0.09)
    assert p.window_case5 == pytest.approx(0.09 * math.sqrt(2))
    assert p.size_mode_aware
    assert (p.case4_threshold, p.case5_threshold) == CALIBRATED_THRESHOLDS[SizeMode.VARIABLE]
    assert p.accept == p.case4_threshold
    assert ScoreParams.from_json(p.to_json()) == p
    assert p.with_thresholds(2.0, 1.0).case5_threshold == 2.0


def test_extract_endpoints():
    log = [conn(0, 1, 0.0, OUT, C1), conn(2, 9, 0.1, IN, C2),
           conn(0, 1, 0.2, IN, C1), conn(1, 2, 0.3, OUT, C3)]
    eps, rest = extract_endpoints(log)
    assert [e.nodes for e in eps] == [(0, 1), (2, 9)]
    assert rest == [log[2], log[3]]
    eps2, rest2 = extract_endpoints(ObservationLog(4, log))
    assert isinstance(rest2, ObservationLog) and rest2.jurisdiction == 4
    assert [e.nodes for e in eps2] == [(0, 1), (2, 9)]


def test_match_prefers_best_and_is_one_to_one():
    log = [conn(1, 2, 1.00, IN, C3), conn(7, 2, 1.01, IN, C3),
           conn(2, 3, 1.10, OUT, C3), conn(2, 4, 1.12, OUT, C3)]
    parts = match_connections(log, P)
    assert [(q.nodes, round(q.score, 6)) for q in parts] == [((1, 2, 3), 1.0), ((7, 2, 4), 0.8)]


def test_match_skips_reflections_and_impossible_shapes():
    log = [conn(1, 2, 1.0, IN, C3), conn(2, 1, 1.1, OUT, C3)]
    assert match_connections(log, P) == []
    # user -> OR entering, OR -> server leaving: would give U-OR-S
    log = [conn(0, 2, 1.0, IN, C1), conn(2, 9, 1.1, OUT, C2)]
    assert match_connections(log, P) == []
    # four routers without a shared node
    log = [conn(1, 2, 1.0, IN, C3), conn(3, 4, 1.2, OUT, C3)]
    assert match_connections(log, P) == []


def test_counter_counts_kernel_evaluations():
    log = [conn(1, 2, 1.0, IN, C3), conn(2, 3, 1.1, OUT, C3), conn(2, 5, 9.0, OUT, C3)]
    c = Counter()
    match_connections(log, P, c)
    assert c["score_pair"] == 1


def test_match_equals_scalar_oracle(small_trace):
    u = small_trace.universe
    logs = partition_trace(u, small_trace, [0, 1])
    p = score_params_for(small_trace.config)
    for log in logs.values():
        _, rest = extract_endpoints(log)
        got = [(q.nodes, q.sender_evidence[0], q.receiver_evidence[0], q.score)
               for q in match_connections(rest, p)]
        want = naive_match(rest.connections, p)
        assert sorted(got) == sorted(want)
        assert len(got) > 50


def test_jurisdiction_partials_equal_accumulate(small_trace):
    logs = partition_trace(small_trace.universe, small_trace, [2])
    p = score_params_for(small_trace.config)
    eps, matched = jurisdiction_partials(logs[2], p)
    e_ref, rest = extract_endpoints(logs[2])
    m_ref = accumulate(match_connections(rest, p))
    assert [(q.nodes, q.sender_evidence) for q in eps] == \
        [(q.nodes, q.sender_evidence) for q in accumulate(e_ref)]
    assert [(q.nodes, q.sender_evidence, q.receiver_evidence) for q in matched] == \
        [(q.nodes, q.sender_evidence, q.receiver_evidence) for q in m_ref]
    for a, b in zip(matched, m_ref):
        assert a.score == pytest.approx(b.score)


def test_canonical_and_accumulate():
    a = PartialCircuit((5, 3, 1), [(1.0, 1)], [(1.1, 1)], 0.5)
    b = PartialCircuit((1, 3, 5), [(2.1, 1)], [(2.0, 1)], 0.25)
    (m,) = accumulate([a, b])
    assert m.nodes == (1, 3, 5)
    assert m.sender_evidence == [(1.1, 1), (2.1, 1)]
    assert m.receiver_evidence == [(1.0, 1), (2.0, 1)]
    assert m.score == 0.75
    assert canonical_nodes((3, 2, 1)) == (1, 2, 3)
    (d,) = accumulate([a, a], dedupe=True)
    assert d.sender_evidence == [(1.1, 1)]


def test_prune():
    p = ScoreParams(case4_threshold=1.0, case5_threshold=2.0)
    parts = [PartialCircuit((1, 2)), PartialCircuit((1, 2, 3), score=1.0),
             PartialCircuit((1, 2, 3, 4), score=1.5), PartialCircuit((1, 2, 4), score=0.9)]
    assert [q.nodes for q in prune(parts, p)] == [(1, 2), (1, 2, 3)]


def test_shape_ok():
    routers = {1, 2, 3}
    assert shape_ok((0, 1, 2, 3, 9), routers)
    assert shape_ok((1, 2, 3), routers)
    assert not shape_ok((0, 1, 9), routers)
    assert not shape_ok((1, 2, 1), routers)
    assert not shape_ok((0, 1, 2, 3, 9, 8), routers)
    assert shape_ok((5, 6, 7), None)


def test_windows():
    assert list(windows((1, 2, 3))) == [(1, 2), (2, 3), (1, 2, 3)]


def test_merge_hand_example():
    routers = {1, 2, 3}
    pool = [PartialCircuit((0, 1), [(0.0, 512)], [(0.0, 512)]),
            PartialCircuit((0, 1, 2), [(0.0, 512)], [(0.2, 512)], 1.0),
            PartialCircuit((1, 2, 3), [(0.1, 512)], [(0.3, 512)], 1.0),
            PartialCircuit((3, 9), [(0.4, 512)], [(0.4, 512)]),
            PartialCircuit((2, 3, 9), [(0.3, 512)], [(0.4, 512)], 1.0)]
    p = ScoreParams(window=0.05, case4_threshold=0.5, case5_threshold=0.5)
    (c,) = merge_overlapping(pool, p, routers)
    assert c.nodes == (0, 1, 2, 3, 9)
    assert c.verdict is Verdict.ASSUMED_REAL
    # three matched parts, plus shared entries on (0,1), (2,3) and (3,9)
    assert c.score == pytest.approx(3.0 + 0.25 * 3)
    assert c.parts == 5


def test_merge_never_breaks_shape():
    routers = {1, 2, 3, 4}
    pool = [PartialCircuit((0, 1, 2), score=1.0), PartialCircuit((1, 2, 3), score=1.0),
            PartialCircuit((2, 3, 4), score=1.0)]
    cands = merge_overlapping(pool, ScoreParams(), routers)
    # four routers in a row is not a circuit window, so (2, 3, 4) stays apart
    assert {c.nodes for c in cands} == {(0, 1, 2, 3), (2, 3, 4)}


def test_candidate_json():
    c = CandidateCircuit((1, 2, 3), 1.5, Verdict.ASSUMED_IMAGINED, 4, 2)
    assert CandidateCircuit.from_json(c.to_json()) == c


evidence = st.lists(st.tuples(st.sampled_from([0.0, 0.01, 0.02, 0.05, 0.1, 0.11, 0.3]),
                              st.sampled_from([256, 512, 513])), max_size=8)


@settings(max_examples=200, deadline=None)
@given(evidence, evidence, st.sampled_from([0, 1]))
def test_matched_evidence_is_maximum(a, b, size_tol):
    assert matched_evidence(a, b, 0.02, size_tol) == max_pairing(a, b, 0.02, size_tol)


def test_reconstruct_on_trace(small_trace):
    p = score_params_for(small_trace.config)
    logs = partition_trace(small_trace.universe, small_trace)
    routers = routers_of(small_trace.universe)
    assert routers_seen(logs) <= routers
    cands = reconstruct(logs, p, None, routers)
    assert cands
    assert all(shape_ok(c.nodes, routers) for c in cands)
    assert any(len(c.nodes) == 5 for c in cands)


def test_merge_equals_brute_force(small_trace):
    p = score_params_for(small_trace.config)
    logs = partition_trace(small_trace.universe, small_trace, [0])
    routers = routers_of(small_trace.universe)
    eps, matched = jurisdiction_partials(logs[0], p)
    pool_parts = eps[:40] + prune(matched, p)[:40]
    pool = {q.nodes: q for q in accumulate(pool_parts, dedupe=True)}
    cands = merge_overlapping(pool_parts, p, routers)
    assert {c.nodes for c in cands} == brute_force_candidates(set(pool), routers)
    for c in cands:
        assert c.score == pytest.approx(
            brute_force_score(c.nodes, pool, p.window, p.size_tolerance, p.overlap_unit))
