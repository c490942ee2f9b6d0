"""Conveyor-line KPI engine: detections and motor vibration in, counts and OEE out.

Typical use::

    from twinline import base_scenario, simulate, replay, evaluate

    out = simulate(base_scenario(duration_s=600))
    report = replay(out.all_detections(), out.scenario.topology(), sensor=out.sensor)
    print(evaluate(report, out.ledger).summary())
"""

from ._validation import CalibrationError, ContractError, ValidationError
from .availability import (
    AvailabilityConfig,
    DowntimeEvent,
    RunStopClassifier,
    RunStopSignal,
    classify_run_stop,
    downtime_events,
    total_downtime,
)
from .core import BoundingBox, Detection, LineSegment2D, centroid, iou, segments_intersect
from .counting import CrossingEvent, EdgeCountSeries, detect_crossings, estimate_speed, fuse_edge_counts, throughput
from .evaluation import EvalSeries, evaluate, identity_switches
from .ingest import (
    GroundTruthLedger,
    LineTopology,
    ParseError,
    SensorSeries,
    load_ledger,
    load_topology,
    merge_streams,
    read_detection_inputs,
    read_detections,
    read_sensor_csv,
)
from .kpi import KpiSeries, compute_kpis, ledger_kpis, oee, rolling_mean
from .pipeline import PipelineConfig, Report, load_report, replay, report_from_ledger
from .simulator import (
    NoiseModel,
    Scenario,
    SimOutput,
    base_scenario,
    dense_packing_scenario,
    load_scenario,
    simulate,
    true_kpis,
)
from .tracking import ByteTracker, Track, TrackerConfig, TrackSnapshot

__version__ = "0.1.0"

__all__ = [
    "AvailabilityConfig", "BoundingBox", "ByteTracker", "CalibrationError", "ContractError", "CrossingEvent",
    "Detection", "DowntimeEvent", "EdgeCountSeries", "EvalSeries", "GroundTruthLedger", "KpiSeries",
    "LineSegment2D", "LineTopology", "NoiseModel", "ParseError", "PipelineConfig", "Report", "RunStopClassifier",
    "RunStopSignal", "Scenario", "SensorSeries", "SimOutput", "Track", "TrackSnapshot", "TrackerConfig",
    "ValidationError", "base_scenario", "centroid", "classify_run_stop", "compute_kpis", "dense_packing_scenario",
    "detect_crossings", "downtime_events", "estimate_speed", "evaluate", "fuse_edge_counts", "identity_switches",
    "iou", "ledger_kpis", "load_ledger", "load_report", "load_scenario", "load_topology", "merge_streams", "oee",
    "read_detection_inputs", "read_detections", "read_sensor_csv", "replay", "report_from_ledger", "rolling_mean",
    "segments_intersect", "simulate", "throughput", "total_downtime", "true_kpis",
]
