"""Discrete-event generator of Tor-like traffic over a jurisdiction universe.

The simulator repeatedly draws one of four actions (add user, remove user,
create a new circuit, send traffic) and records every link traversal as a
:class:`ConnectionRecord`. Time is virtual; a run is bounded by a virtual
duration and optionally by an action budget, so a seed fully determines the
trace.

Each logical activity draws from its own random stream (placement, actions,
paths, latency, sizes). Changing the jurisdiction partition therefore leaves
the action sequence, the chosen node ids and the latencies untouched, which
keeps sweep points comparable.
"""

from __future__ import annotations

import enum
import logging
import math
import random

import numpy as np
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

from .errors import CircuitBuildError, CircuitStateError, ConfigurationError
from .overlay import NodeKind, Universe, WeightedPicker, build_universe

log = logging.getLogger(__name__)

TIME_DECIMALS = 6
_MIN_STEP = 2e-6


class Action(enum.Enum):
    NEW_CIRCUIT = "new_circuit"
    ADD_USER = "add_user"
    REMOVE_USER = "remove_user"
    SEND_TRAFFIC = "send_traffic"


class SizeMode(enum.Enum):
    FIXED = "fixed"
    VARIABLE = "variable"


class PathStrategy(enum.Enum):
    UNIFORM = "uniform"
    RELATIONSHIP_SAFE = "relationship-safe"
    SENDER_SAFE = "sender-safe"


@dataclass(frozen=True)
class ActionDistribution:
    p_new_circuit: float = 0.1
    p_add_user: float = 0.1
    p_remove_user: float = 0.1
    p_send_traffic: float = 0.7

    def __post_init__(self):
        probs = self.as_tuple()
        if any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigurationError(f"action probabilities must be >= 0 and sum to 1: {probs}")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.p_new_circuit, self.p_add_user, self.p_remove_user, self.p_send_traffic)


_ACTION_ORDER = (Action.NEW_CIRCUIT, Action.ADD_USER, Action.REMOVE_USER, Action.SEND_TRAFFIC)


@dataclass(frozen=True)
class LatencyModel:
    """Log-normal per-link delay plus a constant per-node processing delay (seconds)."""

    median: float = 0.100
    sigma: float = 0.3
    processing: float = 0.005

    def __post_init__(self):
        if self.median <= 0 or self.sigma < 0 or self.processing < 0:
            raise ConfigurationError("latency median must be > 0, sigma and processing >= 0")


@dataclass(frozen=True)
class SizeModel:
    mode: SizeMode = SizeMode.FIXED
    cell_size: int = 512
    min_size: int = 256
    max_size: int = 4096

    def __post_init__(self):
        if self.cell_size <= 0 or not 0 < self.min_size <= self.max_size:
            raise ConfigurationError("packet sizes must be positive")

    def sample(self, rng: random.Random) -> int:
        if self.mode is SizeMode.FIXED:
            return self.cell_size
        return rng.randint(self.min_size, self.max_size)


@dataclass(frozen=True)
class SimConfig:
    or_count: int = 600
    server_count: int = 2000
    jurisdiction_weights: tuple[float, ...] = (1.0,) * 6
    jurisdiction_labels: tuple[str | None, ...] | None = None
    exact_or_counts: bool = False
    # Users and servers default to the jurisdiction weights.
    user_weights: tuple[float, ...] | None = None
    server_weights: tuple[float, ...] | None = None
    actions: ActionDistribution = field(default_factory=ActionDistribution)
    duration: float = 1800.0
    max_actions: int | None = None
    action_gap: float = 0.05
    reply_range: tuple[int, int] = (1, 5)
    reply_gap: float = 0.01
    sizes: SizeModel = field(default_factory=SizeModel)
    latency: LatencyModel = field(default_factory=LatencyModel)
    strategy: PathStrategy = PathStrategy.UNIFORM
    seed: int = 0

    def __post_init__(self):
        if self.duration <= 0 or self.action_gap <= 0 or self.reply_gap < 0:
            raise ConfigurationError("duration and action gap must be positive")
        if self.max_actions is not None and self.max_actions <= 0:
            raise ConfigurationError("max_actions must be positive")
        lo, hi = self.reply_range
        if not 1 <= lo <= hi:
            raise ConfigurationError("reply range must satisfy 1 <= lo <= hi")
        for w in (self.user_weights, self.server_weights, self.jurisdiction_labels):
            if w is not None and len(w) != len(self.jurisdiction_weights):
                raise ConfigurationError("per-jurisdiction lists must match jurisdiction count")

    def replace(self, **changes) -> "SimConfig":
        from dataclasses import replace

        return replace(self, **changes)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["sizes"]["mode"] = self.sizes.mode.value
        doc["strategy"] = self.strategy.value
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "SimConfig":
        doc = dict(doc)
        if "actions" in doc:
            doc["actions"] = ActionDistribution(**doc["actions"])
        if "sizes" in doc:
            sizes = dict(doc["sizes"])
            sizes["mode"] = SizeMode(sizes.get("mode", "fixed"))
            doc["sizes"] = SizeModel(**sizes)
        if "latency" in doc:
            doc["latency"] = LatencyModel(**doc["latency"])
        if "strategy" in doc:
            doc["strategy"] = PathStrategy(doc["strategy"])
        for key in ("jurisdiction_weights", "jurisdiction_labels", "user_weights",
                    "server_weights", "reply_range"):
            if doc.get(key) is not None:
                doc[key] = tuple(doc[key])
        return cls(**doc)


class ConnectionRecord(NamedTuple):
    sender: int
    receiver: int
    timestamp: float
    size: int
    truth_circuit_id: int


@dataclass
class Circuit:
    circuit_id: int
    user: int
    or1: int
    or2: int
    or3: int
    server: int
    created_at: float
    ready_at: float = 0.0
    destroyed_at: float | None = None

    @property
    def nodes(self) -> tuple[int, int, int, int, int]:
        return (self.user, self.or1, self.or2, self.or3, self.server)

    @property
    def active(self) -> bool:
        return self.destroyed_at is None

    def to_json(self) -> dict:
        return asdict(self)


RECORD_FIELDS = ConnectionRecord._fields


class TraceLog:
    """Time-ordered records plus ground truth.

    Records are stored column-wise (``sender``, ``receiver``, ``timestamp``,
    ``size``, ``truth_circuit_id`` numpy arrays); :attr:`records` builds the
    tuple view on first use.
    """

    def __init__(self, universe: Universe, columns: dict[str, np.ndarray], circuits: list[Circuit],
                 final_time: float, actions: list[tuple[Action, bool]] | None = None,
                 config: SimConfig | None = None):
        self.universe = universe
        self.columns = columns
        self.circuits = circuits
        self.final_time = final_time
        self.actions = actions or []
        self.config = config
        self._records: list[ConnectionRecord] | None = None

    @classmethod
    def from_records(cls, universe: Universe, records, circuits, final_time: float = 0.0,
                     **kw) -> "TraceLog":
        records = sorted(records, key=lambda r: r.timestamp)
        return cls(universe, columns_from_records(records), circuits, final_time, **kw)

    def __len__(self) -> int:
        return len(self.columns["timestamp"])

    @property
    def records(self) -> list[ConnectionRecord]:
        if self._records is None:
            cols = [self.columns[f].tolist() for f in RECORD_FIELDS]
            self._records = [ConnectionRecord(*row) for row in zip(*cols)]
        return self._records

    def action_counts(self, include_forced: bool = True) -> dict[str, int]:
        out = {a.value: 0 for a in Action}
        for a, forced in self.actions:
            if include_forced or not forced:
                out[a.value] += 1
        return out


def columns_from_records(records) -> dict[str, np.ndarray]:
    records = list(records)
    n = len(records)
    dtypes = (np.int64, np.int64, np.float64, np.int64, np.int64)
    return {f: np.fromiter((r[i] for r in records), dt, n)
            for i, (f, dt) in enumerate(zip(RECORD_FIELDS, dtypes))}


def sample_action(dist: ActionDistribution, active_users: int, rng: random.Random) -> Action:
    if active_users == 0:
        return Action.ADD_USER
    u = rng.random()
    acc = 0.0
    for action, p in zip(_ACTION_ORDER, dist.as_tuple()):
        acc += p
        if u < acc and p > 0:
            return action
    # Rounding leftovers fall on the last action with positive mass.
    return next(a for a, p in zip(reversed(_ACTION_ORDER), reversed(dist.as_tuple())) if p > 0)


def sample_latency(model: LatencyModel, rng: random.Random) -> float:
    """One per-link delay in seconds (processing delay not included)."""
    if model.sigma == 0:
        return model.median
    return max(model.median * math.exp(model.sigma * rng.gauss(0.0, 1.0)), _MIN_STEP)


def _stream(seed: int, name: str) -> random.Random:
    return random.Random(f"{seed}:{name}")


class _LatencyStream:
    """Per-link delays drawn from a seeded numpy generator in blocks."""

    BLOCK = 1 << 14

    def __init__(self, model: LatencyModel, seed: int):
        self.model = model
        self._gen = np.random.Generator(np.random.PCG64(_stream(seed, "latency").getrandbits(128)))
        self._buf: list[float] = []
        self._pos = 0

    def _refill(self) -> None:
        m = self.model
        z = self._gen.standard_normal(self.BLOCK)
        lat = np.maximum(m.median * np.exp(m.sigma * z), _MIN_STEP) if m.sigma else \
            np.full(self.BLOCK, m.median)
        self._buf = (lat + m.processing).tolist()
        self._pos = 0

    def next(self) -> float:
        if self._pos >= len(self._buf):
            self._refill()
        v = self._buf[self._pos]
        self._pos += 1
        return v


def universe_for(config: SimConfig) -> Universe:
    """The router/server universe a simulation with ``config`` starts from."""
    return build_universe(
        config.or_count,
        config.server_count,
        config.jurisdiction_weights,
        _stream(config.seed, "placement"),
        labels=config.jurisdiction_labels,
        exact_or_counts=config.exact_or_counts,
        server_weights=config.server_weights,
    )


class Simulator:
    """Stateful event loop; use :func:`run_simulation` for the one-shot API."""

    def __init__(self, config: SimConfig, universe: Universe | None = None):
        self.config = config
        self.base = universe if universe is not None else universe_for(config)
        counts = self.base.counts
        n_or = sum(c[NodeKind.ONION_ROUTER] for c in counts.values())
        n_srv = sum(c[NodeKind.SERVER] for c in counts.values())
        if n_or < 3 or n_srv < 1:
            raise ConfigurationError(
                f"need at least 3 onion routers and 1 server, got {n_or} and {n_srv}"
            )
        seed = config.seed
        # The placement stream continues after universe construction for users.
        self._rng_place = _stream(seed, "users")
        self._rng_actions = _stream(seed, "actions")
        self._rng_paths = _stream(seed, "paths")
        self._latency = _LatencyStream(config.latency, seed)
        self._rng_sizes = _stream(seed, "sizes")
        self._user_picker = WeightedPicker(config.user_weights or config.jurisdiction_weights)

        self.membership = list(self.base.membership)
        self.kinds = list(self.base.kinds)
        self.ors = self.base.nodes_of_kind(NodeKind.ONION_ROUTER)
        self.servers = self.base.nodes_of_kind(NodeKind.SERVER)
        self.ors_by_jur: dict[int, list[int]] = {}
        for n in self.ors:
            self.ors_by_jur.setdefault(self.membership[n], []).append(n)

        self.records: list[tuple] = []
        self.circuits: list[Circuit] = []
        self.active_users: list[int] = []
        self._user_slot: dict[int, int] = {}
        self.circuit_of: dict[int, Circuit] = {}
        self.actions: list[tuple[Action, bool]] = []
        self.build_failures = 0

    # -- primitives ---------------------------------------------------------

    def _traverse(self, path: Sequence[int], t: float, size: int, cid: int) -> float:
        """Send one packet along ``path`` starting at ``t``; return arrival+processing time.

        Record timestamps are the departure times; they are rounded to
        microseconds when the trace is assembled.
        """
        emit = self.records.append
        delay = self._latency.next
        for i in range(len(path) - 1):
            emit((path[i], path[i + 1], t, size, cid))
            t += delay()
        return t

    def _as_records(self, start: int) -> list[ConnectionRecord]:
        return [ConnectionRecord(a, b, round(t, TIME_DECIMALS), z, c)
                for a, b, t, z, c in self.records[start:]]

    def select_path(self, user: int) -> tuple[int, int, int, int]:
        """Pick (or1, or2, or3, server) for ``user`` per the configured strategy."""
        rng = self._rng_paths
        strategy = self.config.strategy
        if strategy is PathStrategy.UNIFORM:
            or1, or2, or3 = (self.ors[i] for i in rng.sample(range(len(self.ors)), 3))
            return or1, or2, or3, self.servers[rng.randrange(len(self.servers))]

        j_user = self.membership[user]
        entry_pool = self.ors_by_jur.get(j_user, [])
        for _ in range(100):
            server = self.servers[rng.randrange(len(self.servers))]
            if not entry_pool:
                break
            or1 = entry_pool[rng.randrange(len(entry_pool))]
            if strategy is PathStrategy.RELATIONSHIP_SAFE:
                exit_pool = [n for n in self.ors_by_jur.get(self.membership[server], []) if n != or1]
                if not exit_pool:
                    self.build_failures += 1
                    log.debug("no exit router next to server %d, resampling", server)
                    continue
                or3 = exit_pool[rng.randrange(len(exit_pool))]
            else:
                or3 = None
            rest = [n for n in self.ors if n != or1 and n != or3]
            if len(rest) < (1 if or3 is not None else 2):
                self.build_failures += 1
                continue
            if or3 is None:
                or2, or3 = (rest[i] for i in rng.sample(range(len(rest)), 2))
            else:
                or2 = rest[rng.randrange(len(rest))]
            return or1, or2, or3, server
        raise CircuitBuildError(
            f"{strategy.value} path unsatisfiable for user {user} in jurisdiction {j_user}"
        )

    def build_circuit(self, user: int, now: float) -> tuple[Circuit, list[ConnectionRecord]]:
        """Extend a new circuit hop by hop; one round trip per extension."""
        start = len(self.records)
        circuit = self._build(user, now)
        return circuit, self._as_records(start)

    def teardown_circuit(self, circuit: Circuit, now: float) -> list[ConnectionRecord]:
        start = len(self.records)
        self._teardown(circuit, now)
        return self._as_records(start)

    def send_payload(self, circuit: Circuit, now: float) -> list[ConnectionRecord]:
        """One request to the server and 1-5 replies back to the user."""
        start = len(self.records)
        self._payload(circuit, now)
        return self._as_records(start)

    def _build(self, user: int, now: float) -> Circuit:
        or1, or2, or3, server = self.select_path(user)
        circuit = Circuit(len(self.circuits), user, or1, or2, or3, server, created_at=now)
        cell = self.config.sizes.cell_size
        path = (user, or1, or2, or3)
        t = now
        for depth in (1, 2, 3):
            t = self._traverse(path[: depth + 1], t, cell, circuit.circuit_id)
            t = self._traverse(path[depth::-1], t, cell, circuit.circuit_id)
        circuit.ready_at = t
        self.circuits.append(circuit)
        self.circuit_of[user] = circuit
        return circuit

    def _teardown(self, circuit: Circuit, now: float) -> None:
        if not circuit.active:
            raise CircuitStateError(f"circuit {circuit.circuit_id} already destroyed")
        t = max(now, circuit.ready_at)
        circuit.destroyed_at = t
        self._traverse(circuit.nodes[:4], t, self.config.sizes.cell_size, circuit.circuit_id)
        if self.circuit_of.get(circuit.user) is circuit:
            del self.circuit_of[circuit.user]

    def _payload(self, circuit: Circuit, now: float) -> None:
        if not circuit.active:
            raise CircuitStateError(f"circuit {circuit.circuit_id} is destroyed")
        cfg = self.config
        rng = self._rng_sizes
        cid = circuit.circuit_id
        forward = circuit.nodes
        backward = forward[::-1]
        t = max(now, circuit.ready_at)
        t_server = self._traverse(forward, t, cfg.sizes.sample(rng), cid)
        for i in range(rng.randint(*cfg.reply_range)):
            self._traverse(backward, t_server + i * cfg.reply_gap, cfg.sizes.sample(rng), cid)

    # -- actions ------------------------------------------------------------

    def _add_user(self, now: float) -> None:
        node = len(self.kinds)
        attempts = 0
        while True:
            self.membership.append(self._user_picker.pick(self._rng_place))
            self.kinds.append(NodeKind.USER)
            try:
                self._build(node, now)
                break
            except CircuitBuildError:
                # Resample the user's placement; the id is reused only because
                # the failed node never emitted any traffic.
                self.membership.pop()
                self.kinds.pop()
                attempts += 1
                self.build_failures += 1
                if attempts >= 100:
                    raise
        self._user_slot[node] = len(self.active_users)
        self.active_users.append(node)

    def _pick_user(self) -> int:
        return self.active_users[self._rng_actions.randrange(len(self.active_users))]

    def _deactivate(self, user: int) -> None:
        slot = self._user_slot.pop(user)
        last = self.active_users.pop()
        if last != user:
            self.active_users[slot] = last
            self._user_slot[last] = slot

    def step(self, now: float) -> Action:
        forced = not self.active_users
        action = sample_action(self.config.actions, len(self.active_users), self._rng_actions)
        self.actions.append((action, forced))
        if action is Action.ADD_USER:
            self._add_user(now)
        elif action is Action.REMOVE_USER:
            user = self._pick_user()
            self._teardown(self.circuit_of[user], now)
            self._deactivate(user)
        elif action is Action.NEW_CIRCUIT:
            user = self._pick_user()
            old = self.circuit_of[user]
            self._teardown(old, now)
            self._build(user, old.destroyed_at + self.config.latency.processing)
        else:
            self._payload(self.circuit_of[self._pick_user()], now)
        return action

    def run(self) -> TraceLog:
        cfg = self.config
        rng = self._rng_actions
        now = 0.0
        while True:
            now += rng.expovariate(1.0 / cfg.action_gap)
            if now > cfg.duration:
                break
            if cfg.max_actions is not None and len(self.actions) >= cfg.max_actions:
                break
            self.step(now)
        if self.build_failures:
            log.info("%d path-selection retries during simulation", self.build_failures)
        universe = Universe(self.base.jurisdictions, tuple(self.membership), tuple(self.kinds))
        return TraceLog(universe, self.columns(), self.circuits, now, self.actions, cfg)

    def columns(self) -> dict[str, np.ndarray]:
        """Emitted records as time-sorted columns (stable for equal timestamps)."""
        n = len(self.records)
        if n == 0:
            return columns_from_records([])
        arr = np.array(self.records, dtype=np.float64)
        ts = np.round(arr[:, 2], TIME_DECIMALS)
        order = np.argsort(ts, kind="stable")
        arr = arr[order]
        # Ids and sizes are small integers, exact in float64.
        return {
            "sender": arr[:, 0].astype(np.int64),
            "receiver": arr[:, 1].astype(np.int64),
            "timestamp": ts[order],
            "size": arr[:, 3].astype(np.int64),
            "truth_circuit_id": arr[:, 4].astype(np.int64),
        }


def run_simulation(config: SimConfig, universe: Universe | None = None) -> TraceLog:
    return Simulator(config, universe).run()
