"""Compare reconstructed candidates with the simulator's ground truth."""

from __future__ import annotations

import math
import statistics
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

from scipy.stats import binom

from .errors import UndefinedMetricsError
from .overlay import NodeKind, Universe
from .reconstructor import CandidateCircuit, Verdict, canonical_nodes, windows
from .simulator import Circuit

METRICS = (
    "relationship_revealing_pct",
    "reconstruction_pct",
    "imagined_pct",
    "imagined_discarded_pct",
    "real_discarded_pct",
    "expected_max_pct",
)


@dataclass(frozen=True)
class CandidateLabel:
    real: bool
    relationship_revealing: bool
    shows_user: bool
    shows_server: bool
    circuit_ids: frozenset[int] = frozenset()


class TruthIndex:
    """Lookup from any contiguous piece of a true circuit path to its circuits."""

    def __init__(self, circuits: Iterable[Circuit]):
        self.circuits = list(circuits)
        self._index: dict[tuple[int, ...], set[int]] = {}
        for c in self.circuits:
            for w in windows(c.nodes):
                self._index.setdefault(canonical_nodes(w), set()).add(c.circuit_id)

    def circuits_containing(self, nodes: Sequence[int]) -> frozenset[int]:
        return frozenset(self._index.get(canonical_nodes(tuple(nodes)), ()))


def _truth(truth) -> TruthIndex:
    if isinstance(truth, TruthIndex):
        return truth
    circuits = truth.circuits if hasattr(truth, "circuits") else truth
    return TruthIndex(circuits)


def label_candidate(c: CandidateCircuit, truth, universe: Universe) -> CandidateLabel:
    ids = _truth(truth).circuits_containing(c.nodes)
    ends = {universe.kind_of(c.nodes[0]), universe.kind_of(c.nodes[-1])}
    shows_user = NodeKind.USER in ends
    shows_server = NodeKind.SERVER in ends
    real = bool(ids)
    return CandidateLabel(real, real and shows_user and shows_server, shows_user, shows_server,
                          ids)


def reconstructible_circuits(circuits: Iterable[Circuit], universe: Universe,
                             coalition: Iterable[int]) -> set[int]:
    """Circuits whose first and last links both cross a coalition member's border."""
    members = set(coalition)
    m = universe.membership

    def seen(a: int, b: int) -> bool:
        return m[a] != m[b] and (m[a] in members or m[b] in members)

    return {c.circuit_id for c in circuits if seen(c.user, c.or1) and seen(c.or3, c.server)}


def expected_max_oracle(truth, universe: Universe, coalition: Iterable[int]) -> float:
    circuits = truth.circuits if hasattr(truth, "circuits") else list(truth)
    if not circuits:
        return 0.0
    return 100.0 * len(reconstructible_circuits(circuits, universe, coalition)) / len(circuits)


def revealed_circuits(candidates: Sequence[CandidateCircuit],
                      labels: Sequence[CandidateLabel]) -> set[int]:
    out = set()
    for c, lab in zip(candidates, labels):
        if c.verdict is Verdict.ASSUMED_REAL and lab.relationship_revealing:
            out |= lab.circuit_ids
    return out


def reconstructed_circuits(candidates: Sequence[CandidateCircuit],
                           labels: Sequence[CandidateLabel]) -> set[int]:
    out = set()
    for c, lab in zip(candidates, labels):
        if c.verdict is Verdict.ASSUMED_REAL and lab.real and len(c.nodes) >= 3:
            out |= lab.circuit_ids
    return out


@dataclass
class MetricsReport:
    relationship_revealing_pct: float = 0.0
    reconstruction_pct: float = 0.0
    imagined_pct: float = 0.0
    imagined_discarded_pct: float = 0.0
    real_discarded_pct: float = 0.0
    expected_max_pct: float = 0.0
    circuits: int = 0
    candidates: int = 0
    circuits_per_user: float = 0.0
    iterations: int = 1
    ci: dict[str, tuple[float, float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["ci"] = {k: list(v) for k, v in self.ci.items()}
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "MetricsReport":
        doc = dict(doc)
        doc["ci"] = {k: tuple(v) for k, v in doc.get("ci", {}).items()}
        return cls(**doc)


def compute_metrics(candidates: Sequence[CandidateCircuit], labels: Sequence[CandidateLabel],
                    truth, expected_max_pct: float = 0.0) -> MetricsReport:
    """Headline percentages for one run.

    The two circuit percentages count distinct true circuits; the imagined and
    discard rates are over reconstructed candidates of three or more nodes
    (two-node candidates are raw endpoint observations, not reconstructions).
    """
    circuits = _truth(truth).circuits
    if not circuits:
        raise UndefinedMetricsError("no circuits in the ground truth")
    n = len(circuits)
    users = {c.user for c in circuits}
    report = MetricsReport(
        relationship_revealing_pct=100.0 * len(revealed_circuits(candidates, labels)) / n,
        reconstruction_pct=100.0 * len(reconstructed_circuits(candidates, labels)) / n,
        expected_max_pct=expected_max_pct,
        circuits=n,
        circuits_per_user=n / len(users),
    )
    recreated = [(c, lab) for c, lab in zip(candidates, labels) if len(c.nodes) >= 3]
    report.candidates = len(recreated)
    if recreated:
        total = len(recreated)
        accepted_imagined = sum(1 for c, lab in recreated
                                if c.verdict is Verdict.ASSUMED_REAL and not lab.real)
        discarded_imagined = sum(1 for c, lab in recreated
                                 if c.verdict is Verdict.ASSUMED_IMAGINED and not lab.real)
        discarded_real = sum(1 for c, lab in recreated
                             if c.verdict is Verdict.ASSUMED_IMAGINED and lab.real)
        report.imagined_pct = 100.0 * accepted_imagined / total
        report.imagined_discarded_pct = 100.0 * discarded_imagined / total
        report.real_discarded_pct = 100.0 * discarded_real / total
    return report


def median_ci(values: Sequence[float], level: float = 0.95) -> tuple[float, float, float]:
    """Median with a distribution-free order-statistic confidence interval.

    The interval is ``[x_(k), x_(n-k+1)]`` for the largest ``k`` whose
    binomial coverage reaches ``level``; below six samples no such ``k``
    exists and the sample range is returned.
    """
    xs = sorted(values)
    n = len(xs)
    if n == 0:
        raise ValueError("median of an empty sample")
    med = statistics.median(xs)
    alpha = (1.0 - level) / 2.0
    k = 0
    for cand in range(1, n // 2 + 1):
        if binom.cdf(cand - 1, n, 0.5) <= alpha:
            k = cand
        else:
            break
    if k == 0:
        return med, xs[0], xs[-1]
    return med, xs[k - 1], xs[n - k]


def aggregate_iterations(reports: Sequence[MetricsReport]) -> MetricsReport:
    if not reports:
        raise ValueError("need at least one report")
    out = MetricsReport(iterations=len(reports))
    for name in METRICS + ("circuits_per_user",):
        med, lo, hi = median_ci([getattr(r, name) for r in reports])
        setattr(out, name, med)
        out.ci[name] = (lo, hi)
    out.circuits = int(statistics.median(r.circuits for r in reports))
    out.candidates = int(statistics.median(r.candidates for r in reports))
    return out


def evaluate(candidates: Sequence[CandidateCircuit], trace, coalition: Iterable[int]) -> MetricsReport:
    """Label candidates against ``trace`` and compute the full report."""
    coalition = list(coalition)
    index = TruthIndex(trace.circuits)
    labels = [label_candidate(c, index, trace.universe) for c in candidates]
    exp_max = expected_max_oracle(trace, trace.universe, coalition)
    return compute_metrics(candidates, labels, index, exp_max)


def is_finite_pct(x: float) -> bool:
    return math.isfinite(x) and 0.0 <= x <= 100.0
