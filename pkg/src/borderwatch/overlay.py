"""Overlay network model: nodes, their kinds and the jurisdiction partition.

Every node (user, onion router or server) lives in exactly one
jurisdiction. Jurisdictions form a complete graph, so any traffic whose two
endpoints sit in different jurisdictions crosses a border and is visible to
both of them, while traffic inside one jurisdiction is visible to nobody.
"""

from __future__ import annotations

import bisect
import enum
import itertools
import json
import random
from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import ConfigurationError, ProtocolViolation


class NodeKind(enum.Enum):
    USER = "U"
    ONION_ROUTER = "OR"
    SERVER = "S"


class CaseLabel(enum.IntEnum):
    """Shape of a single observed connection."""

    CASE1 = 1  # user/server -> onion router
    CASE2 = 2  # onion router -> user/server
    CASE3 = 3  # onion router -> onion router


@dataclass(frozen=True)
class Jurisdiction:
    id: int
    label: str | None = None


@dataclass(frozen=True)
class Universe:
    """Immutable node/jurisdiction partition.

    Node ids are dense integers, so ``membership[n]`` and ``kinds[n]`` are the
    jurisdiction and kind of node ``n``.
    """

    jurisdictions: tuple[Jurisdiction, ...]
    membership: tuple[int, ...]
    kinds: tuple[NodeKind, ...]

    def __post_init__(self):
        if len(self.membership) != len(self.kinds):
            raise ConfigurationError("membership and kinds must cover the same nodes")
        n_jur = len(self.jurisdictions)
        if any(j.id != i for i, j in enumerate(self.jurisdictions)):
            raise ConfigurationError("jurisdiction ids must be 0..n-1 in order")
        if any(not 0 <= m < n_jur for m in self.membership):
            raise ConfigurationError("node assigned to an unknown jurisdiction")
        object.__setattr__(
            self, "_is_or", bytes(k is NodeKind.ONION_ROUTER for k in self.kinds)
        )

    def __len__(self) -> int:
        return len(self.kinds)

    def _check(self, node: int) -> None:
        if not 0 <= node < len(self.kinds):
            raise KeyError(f"unknown node id {node}")

    def jurisdiction_of(self, node: int) -> int:
        self._check(node)
        return self.membership[node]

    def kind_of(self, node: int) -> NodeKind:
        self._check(node)
        return self.kinds[node]

    def is_onion_router(self, node: int) -> bool:
        self._check(node)
        return bool(self._is_or[node])

    @property
    def is_or_flags(self) -> bytes:
        """One byte per node, 1 for onion routers; handy for hot loops."""
        return self._is_or

    def nodes_of_kind(self, kind: NodeKind) -> list[int]:
        return [n for n, k in enumerate(self.kinds) if k is kind]

    def nodes_in(self, jurisdiction: int, kind: NodeKind | None = None) -> list[int]:
        return [
            n
            for n, (m, k) in enumerate(zip(self.membership, self.kinds))
            if m == jurisdiction and (kind is None or k is kind)
        ]

    @property
    def counts(self) -> dict[int, dict[NodeKind, int]]:
        out = {j.id: {k: 0 for k in NodeKind} for j in self.jurisdictions}
        for m, k in zip(self.membership, self.kinds):
            out[m][k] += 1
        return out

    def jurisdiction_by_label(self, label: str) -> int:
        for j in self.jurisdictions:
            if j.label == label:
                return j.id
        raise KeyError(f"no jurisdiction labelled {label!r}")

    def with_nodes(self, nodes: Iterable[tuple[NodeKind, int]]) -> "Universe":
        """Return a new universe with extra ``(kind, jurisdiction)`` nodes appended."""
        extra = list(nodes)
        return Universe(
            self.jurisdictions,
            self.membership + tuple(j for _, j in extra),
            self.kinds + tuple(k for k, _ in extra),
        )

    def to_json(self) -> dict:
        return {
            "jurisdictions": [{"id": j.id, "label": j.label} for j in self.jurisdictions],
            "nodes": [
                {"node_id": n, "kind": k.value, "jurisdiction_id": m}
                for n, (m, k) in enumerate(zip(self.membership, self.kinds))
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Universe":
        jurs = tuple(Jurisdiction(j["id"], j.get("label")) for j in doc["jurisdictions"])
        nodes = sorted(doc["nodes"], key=lambda d: d["node_id"])
        if [d["node_id"] for d in nodes] != list(range(len(nodes))):
            raise ConfigurationError("node ids must be dense")
        return cls(
            jurs,
            tuple(d["jurisdiction_id"] for d in nodes),
            tuple(NodeKind(d["kind"]) for d in nodes),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))


class WeightedPicker:
    """Inverse-CDF jurisdiction sampler.

    A single uniform draw is mapped through the cumulative weights, so two
    pickers with different weight vectors driven by the same random stream
    stay coupled; sweeps over jurisdiction counts rely on this.
    """

    def __init__(self, weights: Sequence[float]):
        weights = [float(w) for w in weights]
        if not weights or any(w < 0 for w in weights) or sum(weights) <= 0:
            raise ConfigurationError(
                "jurisdiction weights must be non-negative with at least one positive"
            )
        total = sum(weights)
        self._cum = list(itertools.accumulate(w / total for w in weights))
        self._cum[-1] = 1.0
        self._last_positive = max(i for i, w in enumerate(weights) if w > 0)

    def pick(self, rng: random.Random) -> int:
        idx = bisect.bisect_right(self._cum, rng.random())
        return min(idx, self._last_positive)


def _as_rng(seed) -> random.Random:
    if isinstance(seed, random.Random):
        return seed
    return random.Random(f"universe:{seed}")


def build_universe(
    or_count: int,
    server_count: int,
    jurisdiction_weights: Sequence[float],
    seed,
    *,
    labels: Sequence[str | None] | None = None,
    exact_or_counts: bool = False,
    server_weights: Sequence[float] | None = None,
) -> Universe:
    """Create onion routers and servers and partition them into jurisdictions.

    With ``exact_or_counts`` the weights are read as integer router counts per
    jurisdiction and honoured exactly; otherwise each router draws its
    jurisdiction in proportion to the weights. Servers are always sampled, by
    ``server_weights`` when given and by the jurisdiction weights otherwise.
    Users are not created here; the simulator adds them as it runs.
    """
    if or_count < 0 or server_count < 0:
        raise ConfigurationError("node counts must be non-negative")
    picker = WeightedPicker(jurisdiction_weights)
    n_jur = len(jurisdiction_weights)
    if labels is None:
        labels = [None] * n_jur
    if len(labels) != n_jur:
        raise ConfigurationError("one label per jurisdiction expected")
    rng = _as_rng(seed)

    if exact_or_counts:
        counts = [int(w) for w in jurisdiction_weights]
        if any(c != w for c, w in zip(counts, jurisdiction_weights)):
            raise ConfigurationError("exact allocation needs integer router counts")
        if sum(counts) != or_count:
            raise ConfigurationError(
                f"router counts sum to {sum(counts)}, expected {or_count}"
            )
        or_membership = [j for j, c in enumerate(counts) for _ in range(c)]
    else:
        or_membership = [picker.pick(rng) for _ in range(or_count)]

    server_picker = picker if server_weights is None else WeightedPicker(server_weights)
    if len(server_weights or jurisdiction_weights) != n_jur:
        raise ConfigurationError("server weights must have one entry per jurisdiction")
    srv_membership = [server_picker.pick(rng) for _ in range(server_count)]

    return Universe(
        tuple(Jurisdiction(i, lab) for i, lab in enumerate(labels)),
        tuple(or_membership + srv_membership),
        (NodeKind.ONION_ROUTER,) * or_count + (NodeKind.SERVER,) * server_count,
    )


def crosses_border(u: Universe, a: int, b: int) -> bool:
    return u.jurisdiction_of(a) != u.jurisdiction_of(b)


def classify_case(u: Universe, sender: int, receiver: int) -> CaseLabel:
    s_or = u.is_onion_router(sender)
    r_or = u.is_onion_router(receiver)
    if s_or and r_or:
        return CaseLabel.CASE3
    if r_or:
        return CaseLabel.CASE1
    if s_or:
        return CaseLabel.CASE2
    raise ProtocolViolation(
        f"traffic between two non-router nodes {sender} -> {receiver}"
    )
