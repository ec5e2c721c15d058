"""Simulated jurisdictional traffic-correlation attacks on onion routing circuits."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BorderwatchError,
    CircuitBuildError,
    CircuitStateError,
    ConfigurationError,
    ProtocolViolation,
    UndefinedMetricsError,
)
from .overlay import CaseLabel, NodeKind, Universe, build_universe, classify_case, crosses_border  # noqa: E402
from .simulator import (  # noqa: E402
    ActionDistribution,
    LatencyModel,
    PathStrategy,
    SimConfig,
    SizeMode,
    SizeModel,
    TraceLog,
    run_simulation,
)
from .observer import Direction, ObservationLog, ObservedConnection, partition_trace  # noqa: E402
from .reconstructor import CandidateCircuit, PartialCircuit, ScoreParams, Verdict, reconstruct  # noqa: E402
from .evaluator import MetricsReport, aggregate_iterations, compute_metrics, evaluate  # noqa: E402

__all__ = [
    "ActionDistribution", "BorderwatchError", "CandidateCircuit", "CaseLabel", "CircuitBuildError",
    "CircuitStateError", "ConfigurationError", "Direction", "LatencyModel", "MetricsReport",
    "NodeKind", "ObservationLog", "ObservedConnection", "PartialCircuit", "PathStrategy",
    "ProtocolViolation", "ScoreParams", "SimConfig", "SizeMode", "SizeModel", "TraceLog",
    "UndefinedMetricsError", "Universe", "Verdict", "aggregate_iterations", "build_universe",
    "classify_case", "compute_metrics", "crosses_border", "evaluate", "partition_trace",
    "reconstruct", "run_simulation",
]
