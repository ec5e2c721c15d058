"""Command-line entry point.

    borderwatch simulate    --out trace/        [--config c.json] [--seed N]
    borderwatch observe     --trace trace/ --out obs/ [--coalition 0,2]
    borderwatch reconstruct --observations obs/ --out rec/
    borderwatch evaluate    --candidates rec/candidates.json --trace trace/ --out ev/
    borderwatch calibrate   --out cal/ [--runs 10]
    borderwatch experiment  benchmark --seed 7 --scale 0.1 --out results/

Config files are JSON with optional ``sim`` (SimConfig fields), ``score``
(ScoreParams fields) and ``coalition`` (jurisdiction ids) sections.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, harness, traceio
from .errors import BorderwatchError, ConfigurationError
from .observer import partition_trace
from .reconstructor import ScoreParams, reconstruct
from .simulator import PathStrategy, SimConfig, SizeMode, SizeModel, run_simulation

log = logging.getLogger("borderwatch")

EXIT_RUNTIME = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config file must hold a JSON object")
    unknown = set(doc) - {"sim", "score", "coalition"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return doc


def _sim_config(args, doc: dict) -> SimConfig:
    base = harness.scaled_template(args.scale)
    if getattr(args, "jurisdictions", None):
        base = base.replace(jurisdiction_weights=(1.0,) * args.jurisdictions)
    merged = base.to_json()
    for key, value in doc.get("sim", {}).items():
        if key not in merged:
            raise UsageError(f"unknown sim config field {key!r}")
        merged[key] = {**merged[key], **value} if isinstance(merged[key], dict) else value
    try:
        cfg = SimConfig.from_json(merged)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        if args.size_mode:
            cfg = cfg.replace(sizes=SizeModel(SizeMode(args.size_mode), cfg.sizes.cell_size,
                                              cfg.sizes.min_size, cfg.sizes.max_size))
        if args.strategy:
            cfg = cfg.replace(strategy=PathStrategy(args.strategy))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad sim config: {exc}") from None
    return cfg


def _score_params(args, doc: dict, size_mode: SizeMode | None = None) -> ScoreParams:
    cfg = _sim_config(args, doc)
    mode = size_mode or cfg.sizes.mode
    try:
        base = ScoreParams.from_latency(cfg.latency, mode)
        return ScoreParams.from_json({**base.to_json(), **doc.get("score", {})})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad score config: {exc}") from None


def _coalition(args, doc: dict):
    if getattr(args, "coalition", None):
        try:
            return [int(x) for x in args.coalition.split(",") if x.strip()]
        except ValueError:
            raise UsageError("--coalition takes comma-separated jurisdiction ids") from None
    return doc.get("coalition")


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    cfg = _sim_config(args, _load_config(args.config))
    trace = run_simulation(cfg)
    out = traceio.write_trace(trace, _out(args, "trace"))
    log.info("wrote %d records, %d circuits to %s", len(trace), len(trace.circuits), out)
    return 0


def cmd_observe(args) -> int:
    doc = _load_config(args.config)
    trace = traceio.read_trace(args.trace)
    coalition = _coalition(args, doc)
    try:
        logs = partition_trace(trace.universe, trace, coalition)
    except KeyError as exc:
        raise UsageError(f"bad coalition: {exc}") from None
    traceio.write_observations(logs, trace.universe, _out(args, "observations"))
    return 0


def cmd_reconstruct(args) -> int:
    doc = _load_config(args.config)
    logs, universe = traceio.read_observations(args.observations)
    p = _score_params(args, doc)
    candidates = reconstruct(logs, p, None, harness.routers_of(universe))
    out = _out(args, "reconstruction")
    traceio.write_candidates(candidates, out / "candidates.json")
    (out / "score_params.json").write_text(json.dumps(p.to_json(), indent=2, sort_keys=True) + "\n")
    return 0


def cmd_evaluate(args) -> int:
    doc = _load_config(args.config)
    trace = traceio.read_trace(args.trace)
    candidates = traceio.read_candidates(args.candidates)
    coalition = harness.coalition_ids(trace, _coalition(args, doc))
    result = harness.evaluate_run(candidates, trace, coalition)
    out = _out(args, "evaluation")
    traceio.write_metrics(result.metrics, out / "metrics.json")
    if result.containment_violations:
        log.warning("%d revealed circuits outside the oracle set", result.containment_violations)
    return 0


def cmd_calibrate(args) -> int:
    doc = _load_config(args.config)
    cfg = _sim_config(args, doc)
    seeds = [harness.derive_seed(cfg.seed, i) for i in range(args.runs)]
    base = _score_params(args, doc)
    result = harness.calibrate(cfg, seeds, _coalition(args, doc), args.target, base)
    out = _out(args, "calibration")
    new_doc = dict(doc)
    new_doc["sim"] = cfg.to_json()
    new_doc["score"] = {**doc.get("score", {}),
                        "case4_threshold": result.case4_threshold,
                        "case5_threshold": result.case5_threshold}
    (out / "calibrated_config.json").write_text(json.dumps(new_doc, indent=2, sort_keys=True) + "\n")
    (out / "calibration.json").write_text(json.dumps({**result.to_json(), "seeds": seeds},
                                                     indent=2, sort_keys=True) + "\n")
    print(f"case4_threshold {result.case4_threshold:.6g} case5_threshold {result.case5_threshold:.6g}")
    return 0


def cmd_experiment(args) -> int:
    doc = _load_config(args.config)
    template = _sim_config(args, doc)
    kw = {"scale": args.scale, "iterations": args.iterations, "template": template}
    if args.preset == "realworld":
        kw["rest_of_world_ors"] = args.rest_of_world_ors
    if args.points is not None:
        kw["count"] = args.points
    try:
        preset = harness.get_preset(args.preset, **kw)
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    seed = 0 if args.seed is None else args.seed
    table = harness.run_preset(preset, seed, doc.get("score"),
                               progress=log.debug if args.verbose else None)
    csv_path, json_path = table.write(_out(args, "results"))
    log.info("wrote %s and %s", csv_path, json_path)
    return 0


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, help="RNG seed (base seed for experiments)")
    g.add_argument("--config", help="JSON config file")
    g.add_argument("--out", help="output directory")
    g.add_argument("--size-mode", choices=[m.value for m in SizeMode])
    g.add_argument("--strategy", choices=[s.value for s in PathStrategy])
    g.add_argument("--scale", type=float, default=harness.DEFAULT_SCALE,
                   help="node count and duration scale (default %(default)s)")
    g.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="borderwatch", description=__doc__.splitlines()[0],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="run the traffic simulator")
    p.add_argument("--jurisdictions", type=int, help="uniform jurisdictions (default 6)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("observe", parents=[common], help="split a trace into coalition logs")
    p.add_argument("--trace", required=True)
    p.add_argument("--coalition", help="comma-separated jurisdiction ids (default: all)")
    p.set_defaults(func=cmd_observe)

    p = sub.add_parser("reconstruct", parents=[common], help="rebuild candidate circuits")
    p.add_argument("--observations", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", parents=[common], help="score candidates against the truth")
    p.add_argument("--candidates", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--coalition")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("calibrate", parents=[common], help="derive prune thresholds")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--target", type=float, default=0.95)
    p.add_argument("--jurisdictions", type=int)
    p.add_argument("--coalition")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("experiment", parents=[common], help="run a preset end to end")
    p.add_argument("preset", choices=sorted(harness.PRESETS))
    p.add_argument("--iterations", type=int, help="iterations per sweep point")
    p.add_argument("--points", type=int, help="number of sweep points")
    p.add_argument("--rest-of-world-ors", type=int,
                   help="realworld only: routers outside the named countries (default: remainder)")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.scale <= 0:
        parser.error("--scale must be positive")
    if getattr(args, "runs", 1) < 1 or (getattr(args, "iterations", None) or 1) < 1:
        parser.error("counts must be positive")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"borderwatch: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"borderwatch: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BorderwatchError, OSError, ValueError, KeyError) as exc:
        print(f"borderwatch: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
