"""``twinline`` command line: simulate, replay, evaluate.

Exit codes: 0 success, 2 input or validation error, 3 report written but
some minutes are data gaps. ``TWINLINE_LOG`` sets log verbosity
(error, warn, info, debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

from ._validation import CalibrationError, ContractError, ValidationError
from .availability import AvailabilityConfig
from .evaluation import evaluate
from .ingest import load_ledger, load_topology, read_detection_inputs, read_sensor_csv, tomllib
from .pipeline import PipelineConfig, load_report, replay
from .simulator import ledger_summary, load_scenario, simulate, write_outputs
from .tracking import TrackerConfig

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_DATA_GAP = 3

_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
           "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("twinline")


def _setup_logging() -> None:
    name = os.environ.get("TWINLINE_LOG", "warn").strip().lower()
    level = _LEVELS.get(name)
    logging.basicConfig(level=level or logging.WARNING, format="twinline: %(levelname)s: %(message)s",
                        stream=sys.stderr)
    if level is None:
        log.warning("TWINLINE_LOG=%r not recognised; using warn", name)


def load_pipeline_config(path: Optional[str]) -> PipelineConfig:
    """Pipeline settings from a TOML file with optional tables
    ``[tracker]``, ``[availability]`` and ``[counting]``."""
    if path is None:
        return PipelineConfig()
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"config: {exc}") from None
    unknown = set(doc) - {"tracker", "availability", "counting"}
    if unknown:
        raise ValidationError(f"config: unknown table(s) {sorted(unknown)}")
    try:
        cfg = PipelineConfig(
            tracker=TrackerConfig(**doc.get("tracker", {})),
            availability=AvailabilityConfig(**doc.get("availability", {})),
        )
        counting = dict(doc.get("counting", {}))
        bad = set(counting) - {"refractory_ms", "smoothing_window"}
        if bad:
            raise ValidationError(f"counting: unknown key(s) {sorted(bad)}")
        cfg = replace(cfg, **counting)
    except TypeError as exc:
        raise ValidationError(f"config: {exc}") from None
    if cfg.smoothing_window < 1 or cfg.smoothing_window % 2 == 0:
        raise ValidationError("smoothing_window: must be odd and >= 1")
    if cfg.refractory_ms < 0:
        raise ValidationError("refractory_ms: must be >= 0")
    return cfg


def cmd_simulate(args) -> int:
    sc = load_scenario(args.scenario)
    if args.seed is not None:
        sc = sc.with_seed(args.seed)
    if args.frame_truth:
        sc = replace(sc, record_frame_truth=True)
    out = simulate(sc)
    write_outputs(out, args.out)
    print(f"{ledger_summary(out.ledger)}, digest {out.digest()[:16]}")
    return EXIT_OK


def _pct(v) -> str:
    return "n/a" if v is None else f"{100.0 * v:.2f}%"


def cmd_replay(args) -> int:
    cfg = load_pipeline_config(args.config)
    topology = load_topology(args.topology)
    dets = read_detection_inputs(args.detections)
    sensor = read_sensor_csv(args.sensor) if args.sensor else None
    ledger = load_ledger(args.ledger) if args.ledger else None
    report = replay(dets.items, topology, sensor=sensor, ledger=ledger, config=cfg)
    report.write(args.out, tracks=not args.no_tracks)
    s = report.session
    print(
        f"A {_pct(s['availability'])}  P {_pct(s['performance'])}  Q {_pct(s['quality'])}  "
        f"OEE {_pct(s['oee'])}  pieces {s['counts']['q_total']} ({s['counts']['q_bad']} bad)  "
        f"downtime {s['t_downtime_s']:.1f} s"
    )
    if report.flags.get("performance_anomaly"):
        print(f"performance above 1 in minutes {report.flags['performance_anomaly_minutes']}")
    gaps = report.data_gap_minutes
    if gaps:
        print(f"data gap in minutes {gaps}", file=sys.stderr)
        return EXIT_DATA_GAP
    return EXIT_OK


def cmd_evaluate(args) -> int:
    report = load_report(args.report)
    ledger = load_ledger(args.ledger)
    ev = evaluate(report, ledger)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "evaluation.csv").write_text(ev.to_csv(), encoding="utf-8")
    (out / "evaluation_summary.json").write_text(json.dumps(ev.summary(), sort_keys=True, indent=1) + "\n",
                                                 encoding="utf-8")
    acc = ev.mean_accuracy_pct
    print(
        f"mean count error {ev.mean_count_error_pct:.2f}%  mean OEE error {ev.mean_oee_error_pct:.2f}%  "
        f"mean accuracy {'n/a' if acc is None else f'{acc:.1f}%'}"
        + (f" ({ev.accuracy_reason})" if ev.accuracy_reason else "")
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="twinline", description="Production-line KPI engine and line simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a scenario and write its input streams and ledger")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--frame-truth", action="store_true", help="record true boxes for every frame in the ledger")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("replay", help="compute counts and KPIs from recorded streams")
    r.add_argument("--detections", required=True, nargs="+", help="detection files or directories of *.jsonl")
    r.add_argument("--sensor")
    r.add_argument("--topology", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--ledger", help="ground-truth ledger; supplies stops when no sensor file is given")
    r.add_argument("--config", help="TOML with [tracker], [availability] and [counting] settings")
    r.add_argument("--no-tracks", action="store_true", help="skip the tracks.jsonl dump")
    r.set_defaults(func=cmd_replay)

    e = sub.add_parser("evaluate", help="compare a report with its ledger")
    e.add_argument("--report", required=True)
    e.add_argument("--ledger", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        return args.func(args)
    except (ValidationError, ContractError, CalibrationError) as exc:
        print(f"twinline: error: {exc}", file=sys.stderr)
    except FileNotFoundError as exc:
        print(f"twinline: error: file not found: {exc.filename}", file=sys.stderr)
    except (OSError, UnicodeDecodeError) as exc:
        print(f"twinline: error: {exc}", file=sys.stderr)
    return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
