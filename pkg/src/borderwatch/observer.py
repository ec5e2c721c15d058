"""Border monitors: which jurisdictions see which records, and in which direction."""

from __future__ import annotations

import enum
from typing import Iterable, NamedTuple

import numpy as np

from .overlay import CaseLabel, Universe, classify_case
from .simulator import TraceLog, columns_from_records


class Direction(enum.Enum):
    INCOMING = "in"
    OUTGOING = "out"


class ObservedConnection(NamedTuple):
    sender: int
    receiver: int
    timestamp: float
    size: int
    direction: Direction
    case: CaseLabel


_FIELDS = ("sender", "receiver", "timestamp", "size", "outgoing", "case")
_DTYPES = (np.int64, np.int64, np.float64, np.int64, np.bool_, np.int8)


def _empty_columns() -> dict[str, np.ndarray]:
    return {f: np.zeros(0, dt) for f, dt in zip(_FIELDS, _DTYPES)}


class ObservationLog:
    """Time-ordered connections seen by one jurisdiction.

    Backed by numpy columns (``sender``, ``receiver``, ``timestamp``, ``size``,
    ``outgoing`` flag, ``case``); :attr:`connections` is the tuple view.
    """

    def __init__(self, jurisdiction: int, connections: Iterable[ObservedConnection] | None = None,
                 *, columns: dict[str, np.ndarray] | None = None):
        self.jurisdiction = jurisdiction
        self._conns: list[ObservedConnection] | None = None
        if columns is not None:
            self.columns = columns
        elif connections is None:
            self.columns = _empty_columns()
        else:
            conns = list(connections)
            self._conns = conns
            rows = [(c.sender, c.receiver, c.timestamp, c.size,
                     c.direction is Direction.OUTGOING, int(c.case)) for c in conns]
            self.columns = {f: np.array([r[i] for r in rows], dtype=dt)
                            for i, (f, dt) in enumerate(zip(_FIELDS, _DTYPES))}

    def __len__(self) -> int:
        return len(self.columns["timestamp"])

    def __eq__(self, other) -> bool:
        if not isinstance(other, ObservationLog):
            return NotImplemented
        return self.jurisdiction == other.jurisdiction and self.connections == other.connections

    def __repr__(self) -> str:
        return f"ObservationLog(jurisdiction={self.jurisdiction}, connections={len(self)})"

    @property
    def connections(self) -> list[ObservedConnection]:
        if self._conns is None:
            cols = self.columns
            out, inc = Direction.OUTGOING, Direction.INCOMING
            cases = [CaseLabel(int(k)) for k in cols["case"].tolist()]
            self._conns = [
                ObservedConnection(s, r, t, z, out if o else inc, k)
                for s, r, t, z, o, k in zip(cols["sender"].tolist(), cols["receiver"].tolist(),
                                            cols["timestamp"].tolist(), cols["size"].tolist(),
                                            cols["outgoing"].tolist(), cases)
            ]
        return self._conns

    def incoming(self) -> list[ObservedConnection]:
        return [c for c in self.connections if c.direction is Direction.INCOMING]

    def outgoing(self) -> list[ObservedConnection]:
        return [c for c in self.connections if c.direction is Direction.OUTGOING]


def observe(universe: Universe, jurisdiction: int, sender: int, receiver: int,
            timestamp: float, size: int) -> ObservedConnection:
    """How ``jurisdiction`` sees one border-crossing record."""
    js = universe.jurisdiction_of(sender)
    jr = universe.jurisdiction_of(receiver)
    if js == jr or jurisdiction not in (js, jr):
        raise ValueError(f"jurisdiction {jurisdiction} does not observe {sender}->{receiver}")
    direction = Direction.OUTGOING if js == jurisdiction else Direction.INCOMING
    return ObservedConnection(sender, receiver, timestamp, size, direction,
                              classify_case(universe, sender, receiver))


def partition_trace(
    universe: Universe,
    trace: TraceLog | Iterable,
    coalition: Iterable[int] | None = None,
) -> dict[int, ObservationLog]:
    """Hand every border-crossing record to the coalition members it crosses.

    ``trace`` may be a :class:`TraceLog` or any iterable of records with
    ``sender``, ``receiver``, ``timestamp`` and ``size`` attributes, in time
    order. Ground truth never reaches the returned logs.
    """
    n_jur = len(universe.jurisdictions)
    members = sorted(range(n_jur) if coalition is None else set(coalition))
    for j in members:
        if not 0 <= j < n_jur:
            raise KeyError(f"unknown jurisdiction {j}")

    if isinstance(trace, TraceLog):
        cols = trace.columns
    else:
        cols = columns_from_records(trace)
    snd, rcv = cols["sender"], cols["receiver"]
    n_nodes = len(universe)
    if len(snd) and (min(snd.min(), rcv.min()) < 0 or max(snd.max(), rcv.max()) >= n_nodes):
        bad = next(x for x in np.r_[snd, rcv].tolist() if not 0 <= x < n_nodes)
        raise KeyError(f"unknown node id {bad}")
    membership = np.asarray(universe.membership, dtype=np.int64)
    is_or = np.frombuffer(universe.is_or_flags, dtype=np.uint8).astype(bool)
    js, jr = membership[snd], membership[rcv]
    cross = js != jr
    s_or, r_or = is_or[snd], is_or[rcv]
    bad = cross & ~s_or & ~r_or
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        classify_case(universe, int(snd[i]), int(rcv[i]))  # raises ProtocolViolation
    case = np.where(s_or & r_or, 3, np.where(r_or, 1, 2)).astype(np.int8)

    logs = {}
    for j in members:
        is_out = cross & (js == j)
        rows = np.flatnonzero(is_out | (cross & (jr == j)))
        logs[j] = ObservationLog(j, columns={
            "sender": snd[rows],
            "receiver": rcv[rows],
            "timestamp": cols["timestamp"][rows],
            "size": cols["size"][rows],
            "outgoing": is_out[rows],
            "case": case[rows],
        })
    return logs
