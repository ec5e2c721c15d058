"""On-disk formats.

Traces and observation logs are tab-separated, one record per line, with a
header row. Timestamps are written with six decimals; the simulator already
rounds to microseconds, so a write/read cycle returns identical floats.

A trace directory holds ``trace.tsv`` plus ``trace.json`` (universe,
circuits, config, final time, action log). An observation directory holds
one ``obs_<jurisdiction>.tsv`` per coalition member and ``observations.json``
with the coalition and the public node directory needed to recover
direction and case labels.
"""

from __future__ import annotations

import io
import json
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .evaluator import MetricsReport
from .observer import ObservationLog
from .overlay import CaseLabel, Universe
from .reconstructor import CandidateCircuit
from .simulator import RECORD_FIELDS, Action, Circuit, SimConfig, TraceLog

TRACE_FILE = "trace.tsv"
TRACE_META = "trace.json"
OBS_META = "observations.json"
OBS_FIELDS = ("sender", "receiver", "timestamp", "size")

_TRACE_FMT = ("%d", "%d", "%.6f", "%d", "%d")
_OBS_FMT = _TRACE_FMT[:4]


def _write_tsv(path: Path, fields, columns: Mapping[str, np.ndarray], fmt) -> None:
    cols = [np.asarray(columns[f]) for f in fields]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\t".join(fields) + "\n")
        if len(cols[0]):
            table = np.empty((len(cols[0]), len(cols)), dtype=object)
            for i, c in enumerate(cols):
                table[:, i] = c.tolist()
            np.savetxt(fh, table, fmt=fmt, delimiter="\t")


def _read_tsv(path: Path, fields) -> dict[str, np.ndarray]:
    with open(path, encoding="ascii") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != list(fields):
            raise ValueError(f"{path}: expected columns {list(fields)}, got {header}")
        body = fh.read()
    if body.strip():
        raw = np.loadtxt(io.StringIO(body), delimiter="\t", dtype=str, ndmin=2)
    else:
        raw = np.zeros((0, len(fields)), dtype=str)
    out = {}
    for i, name in enumerate(fields):
        col = raw[:, i]
        out[name] = col.astype(np.float64) if name == "timestamp" else col.astype(np.int64)
    return out


def write_trace(trace: TraceLog, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_tsv(out / TRACE_FILE, RECORD_FIELDS, trace.columns, _TRACE_FMT)
    meta = {
        "universe": trace.universe.to_json(),
        "circuits": [c.to_json() for c in trace.circuits],
        "final_time": trace.final_time,
        "actions": [[a.value, forced] for a, forced in trace.actions],
        "config": trace.config.to_json() if trace.config else None,
    }
    (out / TRACE_META).write_text(json.dumps(meta, separators=(",", ":")) + "\n")
    return out


def read_trace(path) -> TraceLog:
    path = Path(path)
    meta = json.loads((path / TRACE_META).read_text())
    columns = _read_tsv(path / TRACE_FILE, RECORD_FIELDS)
    return TraceLog(
        Universe.from_json(meta["universe"]),
        columns,
        [Circuit(**c) for c in meta["circuits"]],
        meta["final_time"],
        [(Action(a), bool(forced)) for a, forced in meta.get("actions", [])],
        SimConfig.from_json(meta["config"]) if meta.get("config") else None,
    )


def write_observations(logs: Mapping[int, ObservationLog], universe: Universe, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for j, log in sorted(logs.items()):
        _write_tsv(out / f"obs_{j}.tsv", OBS_FIELDS, log.columns, _OBS_FMT)
    meta = {"coalition": sorted(logs), "universe": universe.to_json()}
    (out / OBS_META).write_text(json.dumps(meta, separators=(",", ":")) + "\n")
    return out


def read_observations(path) -> tuple[dict[int, ObservationLog], Universe]:
    """Load per-jurisdiction logs; direction and case are recomputed from the directory."""
    path = Path(path)
    meta = json.loads((path / OBS_META).read_text())
    universe = Universe.from_json(meta["universe"])
    membership = np.asarray(universe.membership, dtype=np.int64)
    is_or = np.frombuffer(universe.is_or_flags, dtype=np.uint8).astype(bool)
    logs = {}
    for j in meta["coalition"]:
        cols = _read_tsv(path / f"obs_{j}.tsv", OBS_FIELDS)
        s, r = cols["sender"], cols["receiver"]
        cols["outgoing"] = membership[s] == j
        s_or, r_or = is_or[s], is_or[r]
        cols["case"] = np.where(s_or & r_or, CaseLabel.CASE3,
                                np.where(r_or, CaseLabel.CASE1, CaseLabel.CASE2)).astype(np.int8)
        logs[j] = ObservationLog(j, columns=cols)
    return logs, universe


def write_candidates(candidates: Iterable[CandidateCircuit], path) -> None:
    doc = {"candidates": [c.to_json() for c in candidates]}
    Path(path).write_text(json.dumps(doc, separators=(",", ":")) + "\n")


def read_candidates(path) -> list[CandidateCircuit]:
    doc = json.loads(Path(path).read_text())
    return [CandidateCircuit.from_json(c) for c in doc["candidates"]]


def write_metrics(report: MetricsReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")


def read_metrics(path) -> MetricsReport:
    return MetricsReport.from_json(json.loads(Path(path).read_text()))
