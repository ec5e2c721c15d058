"""Experiment orchestration: presets, seeded iterations, calibration, result tables."""

from __future__ import annotations

import csv
import io
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import isotonic_regression

from . import __version__
from .errors import ConfigurationError
from .evaluator import (METRICS, MetricsReport, TruthIndex, aggregate_iterations, compute_metrics,
                        expected_max_oracle, label_candidate, reconstructible_circuits,
                        revealed_circuits)
from .observer import partition_trace
from .overlay import NodeKind, Universe
from .reconstructor import CandidateCircuit, ScoreParams, jurisdiction_partials, prune, reconstruct
from .simulator import ActionDistribution, SimConfig, SizeMode, SizeModel, TraceLog, run_simulation

log = logging.getLogger(__name__)

DEFAULT_SCALE = 0.1
FULL_ORS = 6000
FULL_SERVERS = 20000
FULL_DURATION = 1800.0

# Router counts per country and the cooperating sets they belong to.
COUNTRY_ORS = (
    ("Australia", 50), ("Canada", 262), ("New Zealand", 14), ("UK", 258), ("USA", 1092),
    ("Denmark", 48), ("France", 910), ("Netherlands", 508), ("Norway", 52),
    ("Germany", 1331), ("Belgium", 24), ("Italy", 66), ("Spain", 54), ("Sweden", 190),
)
COALITION_SIZES = (5, 9, 14)
REALWORLD_ORS = 6613
REST_OF_WORLD = "Rest of world"

CSV_COLUMNS = ("sweep_value", "metric", "median", "ci_low", "ci_high")
TABLE_METRICS = METRICS + ("circuits_per_user",)


def derive_seed(base_seed: int, iteration: int) -> int:
    """Per-iteration seed from a counter-based split of ``base_seed``.

    Sweep points share the seed of equal iteration indices, so points differ
    only by the swept parameter.
    """
    ss = np.random.SeedSequence(entropy=int(base_seed), spawn_key=(int(iteration),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class SweepPoint:
    value: float | str
    config: SimConfig
    coalition: tuple[int, ...] | None = None  # None: every jurisdiction cooperates


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    iterations: int
    sweep_variable: str
    points: tuple[SweepPoint, ...]
    scale: float = DEFAULT_SCALE

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigurationError("iteration count must be at least 1")
        if not self.points:
            raise ConfigurationError("sweep schedule is empty")
        values = [p.value for p in self.points]
        if len(set(values)) != len(values):
            raise ConfigurationError("sweep values must be distinct")


def scaled_template(scale: float = DEFAULT_SCALE, **changes) -> SimConfig:
    if not scale > 0:
        raise ConfigurationError("scale must be positive")
    base = SimConfig(
        or_count=max(3, round(FULL_ORS * scale)),
        server_count=max(1, round(FULL_SERVERS * scale)),
        duration=FULL_DURATION * scale,
    )
    return base.replace(**changes)


def _uniform(n: int) -> tuple[float, ...]:
    return (1.0,) * n


def benchmark(scale: float = DEFAULT_SCALE, iterations: int = 50,
              jurisdictions: Sequence[int] = (6, 10, 15),
              template: SimConfig | None = None) -> ExperimentPreset:
    template = template or scaled_template(scale)
    points = []
    for mode in (SizeMode.FIXED, SizeMode.VARIABLE):
        for n in jurisdictions:
            cfg = template.replace(jurisdiction_weights=_uniform(n), sizes=SizeModel(mode),
                                   actions=ActionDistribution(0.1, 0.1, 0.1, 0.7))
            points.append(SweepPoint(f"{n}:{mode.value}", cfg))
    return ExperimentPreset("benchmark", iterations, "jurisdictions:size_mode", tuple(points), scale)


def sweep_jurisdictions(scale: float = DEFAULT_SCALE, iterations: int = 5, start: int = 5,
                        step: int = 5, count: int = 10,
                        template: SimConfig | None = None) -> ExperimentPreset:
    template = template or scaled_template(scale)
    if start < 1 or step < 1 or count < 1:
        raise ConfigurationError("jurisdiction schedule must be positive")
    points = tuple(
        SweepPoint(n, template.replace(jurisdiction_weights=_uniform(n)))
        for n in range(start, start + step * count, step)
    )
    return ExperimentPreset("sweep-jurisdictions", iterations, "jurisdictions", points, scale)


def churn_actions(step: int, increase: float) -> ActionDistribution:
    p_new = round(step * increase, 10)
    p_send = round(0.8 - p_new, 10)
    if p_send < 0:
        raise ConfigurationError("churn schedule drives send-traffic below zero")
    return ActionDistribution(p_new, 0.1, 0.1, p_send)


def circuits_per_user(dist: ActionDistribution) -> float:
    """Nominal circuits per user: one at creation plus renewals over its lifetime."""
    return 1.0 + dist.p_new_circuit / dist.p_remove_user


def sweep_churn(scale: float = DEFAULT_SCALE, iterations: int = 5, jurisdictions: int = 20,
                count: int = 9, increase: float = 0.1,
                template: SimConfig | None = None) -> ExperimentPreset:
    template = template or scaled_template(scale)
    points = []
    for k in range(count):
        dist = churn_actions(k, increase)
        cfg = template.replace(jurisdiction_weights=_uniform(jurisdictions), actions=dist)
        points.append(SweepPoint(round(circuits_per_user(dist), 10), cfg))
    return ExperimentPreset("sweep-churn", iterations, "circuits_per_user", tuple(points), scale)


def realworld_weights(size: int, scale: float = DEFAULT_SCALE,
                      rest_of_world_ors: int | None = None) -> tuple[tuple[int, ...], tuple[str, ...]]:
    """Integer router counts for a coalition plus the rest-of-world jurisdiction.

    By default the rest of the world holds every router not in the coalition,
    so the total stays at the published network size.
    """
    if size not in COALITION_SIZES:
        raise ConfigurationError(f"coalition size must be one of {COALITION_SIZES}")
    named = COUNTRY_ORS[:size]
    counts = [int(round(c * scale)) for _, c in named]
    if rest_of_world_ors is None:
        rest = int(round(REALWORLD_ORS * scale)) - sum(counts)
    else:
        rest = int(round(rest_of_world_ors * scale))
    if rest < 0:
        raise ConfigurationError("rest-of-world router count is negative")
    return tuple(counts) + (rest,), tuple(n for n, _ in named) + (REST_OF_WORLD,)


def realworld_config(size: int, scale: float = DEFAULT_SCALE,
                     rest_of_world_ors: int | None = None,
                     template: SimConfig | None = None, **changes) -> SimConfig:
    counts, labels = realworld_weights(size, scale, rest_of_world_ors)
    template = template or scaled_template(scale)
    # Users and servers follow the router distribution.
    endpoint = tuple(float(c) for c in counts)
    return template.replace(
        or_count=sum(counts),
        jurisdiction_weights=tuple(float(c) for c in counts),
        jurisdiction_labels=labels,
        exact_or_counts=True,
        user_weights=endpoint,
        server_weights=endpoint,
        **changes,
    )


def realworld(scale: float = DEFAULT_SCALE, iterations: int = 5, count: int = 5,
              increase: float = 0.2, sizes: Sequence[int] = COALITION_SIZES,
              rest_of_world_ors: int | None = None,
              template: SimConfig | None = None) -> ExperimentPreset:
    points = []
    for size in sizes:
        for k in range(count):
            dist = churn_actions(k, increase)
            cfg = realworld_config(size, scale, rest_of_world_ors, template, actions=dist)
            cpu = circuits_per_user(dist)
            points.append(SweepPoint(f"Size{size}:{cpu:g}", cfg, tuple(range(size))))
    return ExperimentPreset("realworld", iterations, "coalition:circuits_per_user",
                            tuple(points), scale)


PRESETS: dict[str, Callable[..., ExperimentPreset]] = {
    "benchmark": benchmark,
    "sweep-jurisdictions": sweep_jurisdictions,
    "sweep-churn": sweep_churn,
    "realworld": realworld,
}


def get_preset(name: str, **kw) -> ExperimentPreset:
    try:
        factory = PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return factory(**{k: v for k, v in kw.items() if v is not None})


def score_params_for(config: SimConfig, overrides: Mapping | None = None) -> ScoreParams:
    return ScoreParams.from_latency(config.latency, config.sizes.mode, **dict(overrides or {}))


def routers_of(universe: Universe) -> set[int]:
    # Every onion router is publicly listed.
    return {n for n, k in enumerate(universe.kinds) if k is NodeKind.ONION_ROUTER}


def coalition_ids(trace: TraceLog, coalition: Iterable[int] | None) -> list[int]:
    if coalition is None:
        return list(range(len(trace.universe.jurisdictions)))
    return sorted(set(coalition))


def reconstruct_trace(trace: TraceLog, coalition: Iterable[int] | None, p: ScoreParams,
                      counter: Counter | None = None) -> list[CandidateCircuit]:
    logs = partition_trace(trace.universe, trace, coalition_ids(trace, coalition))
    return reconstruct(logs, p, counter, routers_of(trace.universe))


@dataclass
class IterationResult:
    metrics: MetricsReport
    revealed: set[int]
    oracle: set[int]
    score_pairs: int = 0

    @property
    def containment_violations(self) -> int:
        return len(self.revealed - self.oracle)


def run_iteration(config: SimConfig, coalition: Iterable[int] | None, p: ScoreParams) -> IterationResult:
    trace = run_simulation(config)
    members = coalition_ids(trace, coalition)
    counter: Counter = Counter()
    candidates = reconstruct_trace(trace, members, p, counter)
    return evaluate_run(candidates, trace, members, counter["score_pair"])


def evaluate_run(candidates: Sequence[CandidateCircuit], trace: TraceLog,
                 coalition: Sequence[int], score_pairs: int = 0) -> IterationResult:
    index = TruthIndex(trace.circuits)
    labels = [label_candidate(c, index, trace.universe) for c in candidates]
    oracle = reconstructible_circuits(trace.circuits, trace.universe, coalition)
    exp_max = expected_max_oracle(trace, trace.universe, coalition)
    metrics = compute_metrics(candidates, labels, index, exp_max)
    return IterationResult(metrics, revealed_circuits(candidates, labels), oracle, score_pairs)


@dataclass
class ResultTable:
    metadata: dict
    rows: list[tuple]
    iterations: list[dict] = field(default_factory=list)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in self.rows:
            w.writerow([_fmt(x) for x in row])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {"metadata": self.metadata,
                "rows": [dict(zip(CSV_COLUMNS, r)) for r in self.rows],
                "iterations": self.iterations}

    def write(self, out_dir, stem: str = "results") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
        csv_path.write_text(self.csv_text())
        json_path.write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        return csv_path, json_path

    def median(self, sweep_value, metric: str) -> float:
        for v, m, med, _, _ in self.rows:
            if v == sweep_value and m == metric:
                return med
        raise KeyError((sweep_value, metric))


def _fmt(x):
    return repr(x) if isinstance(x, float) else x


def run_preset(preset: ExperimentPreset, base_seed: int, score_overrides: Mapping | None = None,
               progress: Callable[[str], None] | None = None) -> ResultTable:
    seeds = [derive_seed(base_seed, i) for i in range(preset.iterations)]
    rows, per_iteration, point_meta = [], [], []
    for point in preset.points:
        p = score_params_for(point.config, score_overrides)
        reports = []
        for i, seed in enumerate(seeds):
            cfg = point.config.replace(seed=seed)
            res = run_iteration(cfg, point.coalition, p)
            reports.append(res.metrics)
            per_iteration.append({
                "sweep_value": point.value,
                "iteration": i,
                "seed": seed,
                "coalition": list(point.coalition) if point.coalition is not None else None,
                "metrics": res.metrics.to_json(),
                "containment_violations": res.containment_violations,
                "score_pair_evaluations": res.score_pairs,
            })
            if progress:
                progress(f"{preset.name} {point.value} iteration {i + 1}/{preset.iterations}")
        agg = aggregate_iterations(reports)
        for metric in TABLE_METRICS:
            lo, hi = agg.ci[metric]
            rows.append((point.value, metric, getattr(agg, metric), lo, hi))
        point_meta.append({"sweep_value": point.value, "config": point.config.to_json(),
                           "coalition": list(point.coalition) if point.coalition is not None else None,
                           "score": p.to_json()})
    metadata = {
        "preset": preset.name,
        "base_seed": base_seed,
        "seeds": seeds,
        "iterations": preset.iterations,
        "scale": preset.scale,
        "sweep_variable": preset.sweep_variable,
        "version": __version__,
        "points": point_meta,
    }
    return ResultTable(metadata, rows, per_iteration)


# Calibration


def smallest_threshold(scored: Sequence[tuple[float, bool]], target: float = 0.95) -> float | None:
    """Lowest score at which a partial circuit is real with probability ``target``.

    P(real | score) is estimated by isotonic (non-decreasing) regression of
    the labels on the score; the threshold is the first score whose fitted
    probability reaches ``target``. ``None`` if no score does.
    """
    if not scored:
        return None
    scores = np.array([s for s, _ in scored], dtype=float)
    labels = np.array([r for _, r in scored], dtype=float)
    levels, inverse = np.unique(scores, return_inverse=True)
    weight = np.bincount(inverse).astype(float)
    rate = np.bincount(inverse, labels) / weight
    fitted = isotonic_regression(rate, weights=weight, increasing=True).x
    ok = np.flatnonzero((fitted >= target) & (levels > 0))
    return float(levels[ok[0]]) if len(ok) else None


@dataclass
class CalibrationResult:
    case4_threshold: float
    case5_threshold: float
    samples: dict[str, int]
    precision: dict[str, float]

    def to_json(self) -> dict:
        return {"case4_threshold": self.case4_threshold, "case5_threshold": self.case5_threshold,
                "samples": self.samples, "precision": self.precision}


def labelled_partials(config: SimConfig, coalition: Iterable[int] | None,
                      p: ScoreParams) -> dict[int, list[tuple[float, bool]]]:
    """Accumulated matched partials of one run, keyed by length, with truth labels."""
    trace = run_simulation(config)
    index = TruthIndex(trace.circuits)
    logs = partition_trace(trace.universe, trace, coalition_ids(trace, coalition))
    out: dict[int, list[tuple[float, bool]]] = {3: [], 4: []}
    for j in sorted(logs):
        _, matched = jurisdiction_partials(logs[j], p)
        for part in matched:
            out[len(part.nodes)].append((part.score, bool(index.circuits_containing(part.nodes))))
    return out


def calibrate(config: SimConfig, seeds: Sequence[int], coalition: Iterable[int] | None = None,
              target: float = 0.95, base: ScoreParams | None = None) -> CalibrationResult:
    """Per-case prune thresholds from labelled runs of ``config`` under ``seeds``."""
    p = base or score_params_for(config)
    pool: dict[int, list[tuple[float, bool]]] = {3: [], 4: []}
    for seed in seeds:
        for k, v in labelled_partials(config.replace(seed=seed), coalition, p).items():
            pool[k].extend(v)
    thresholds = {}
    for k, name in ((3, "case4"), (4, "case5")):
        t = smallest_threshold(pool[k], target)
        if t is None:
            top = max((s for s, _ in pool[k]), default=0.0)
            t = top + 1.0  # nothing qualifies: prune the whole case
            log.warning("no %s threshold reaches %.2f precision; pruning all", name, target)
        thresholds[name] = t
    case5 = max(thresholds["case4"], thresholds["case5"])
    precision = {}
    for k, name, t in ((3, "case4", thresholds["case4"]), (4, "case5", case5)):
        kept = [r for s, r in pool[k] if s >= t]
        precision[name] = sum(kept) / len(kept) if kept else 1.0
    return CalibrationResult(thresholds["case4"], case5,
                             {"case4": len(pool[3]), "case5": len(pool[4])}, precision)


def kept_precision(config: SimConfig, seeds: Sequence[int], p: ScoreParams,
                   coalition: Iterable[int] | None = None) -> dict[str, tuple[int, int]]:
    """(real, kept) counts per case after pruning with ``p`` on fresh runs."""
    out = {"case4": [0, 0], "case5": [0, 0]}
    for seed in seeds:
        trace = run_simulation(config.replace(seed=seed))
        index = TruthIndex(trace.circuits)
        logs = partition_trace(trace.universe, trace, coalition_ids(trace, coalition))
        for j in sorted(logs):
            _, matched = jurisdiction_partials(logs[j], p)
            for part in prune(matched, p):
                key = "case4" if len(part.nodes) == 3 else "case5"
                out[key][0] += bool(index.circuits_containing(part.nodes))
                out[key][1] += 1
    return {k: (v[0], v[1]) for k, v in out.items()}
