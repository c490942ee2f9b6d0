"""Replay: detections and sensor data in, KPI report out."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from ._validation import ValidationError
from .availability import STOPPED, AvailabilityConfig, RunStopClassifier, RunStopSignal
from .core import MS_PER_MINUTE, BoundingBox, Detection, gc_paused
from .counting import (
    DEFAULT_REFRACTORY_MS,
    EdgeCountSeries,
    detect_crossings,
    estimate_speed,
    fuse_edge_counts,
    throughput,
)
from .ingest import GroundTruthLedger, LineTopology, SensorSeries, group_frames
from .kpi import KpiSeries, OeeBreakdown, PieceCounts, compute_kpis, counts_from_edges, ledger_kpis
from .tracking import TrackerConfig, TrackSnapshot, track_all_cameras

log = logging.getLogger(__name__)

NO_AVAILABILITY_SOURCE = "no availability source"


@dataclass(frozen=True)
class PipelineConfig:
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    availability: AvailabilityConfig = field(default_factory=AvailabilityConfig)
    refractory_ms: int = DEFAULT_REFRACTORY_MS
    smoothing_window: int = 5


@dataclass
class Report:
    """Engine output for one session, in plain serialisable form.

    ``minutes`` holds one row per minute bin; ``edges`` maps an edge id to its
    count, throughput and speed columns. ``snapshots`` (per camera) is kept in
    memory only and is written separately as a track dump.
    """

    duration_ms: int
    tau_ideal: float
    total_edge: int
    good_edge: int
    session: dict
    minutes: List[dict]
    edges: Dict[int, dict]
    downtime: List[List[int]]
    flags: dict
    availability_source: str
    snapshots: Optional[Dict[int, List[TrackSnapshot]]] = field(default=None, repr=False)

    @property
    def data_gap_minutes(self) -> List[int]:
        return list(self.flags.get("data_gap_minutes", []))

    def cumulative(self, edge_id: int) -> List[int]:
        return list(self.edges[edge_id]["cumulative"])

    def oee_series(self) -> List[Optional[float]]:
        return [m["oee"] for m in self.minutes]

    def to_dict(self) -> dict:
        return {
            "duration_ms": self.duration_ms,
            "tau_ideal": self.tau_ideal,
            "total_edge": self.total_edge,
            "good_edge": self.good_edge,
            "availability_source": self.availability_source,
            "session": self.session,
            "flags": self.flags,
            "downtime": self.downtime,
            "edges": {str(k): v for k, v in sorted(self.edges.items())},
            "minutes": self.minutes,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Report":
        try:
            return cls(
                duration_ms=int(doc["duration_ms"]),
                tau_ideal=float(doc["tau_ideal"]),
                total_edge=int(doc["total_edge"]),
                good_edge=int(doc["good_edge"]),
                session=doc["session"],
                minutes=list(doc["minutes"]),
                edges={int(k): v for k, v in doc["edges"].items()},
                downtime=[list(x) for x in doc.get("downtime", [])],
                flags=doc.get("flags", {}),
                availability_source=doc.get("availability_source", "unknown"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"report: missing or malformed field {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        edge_ids = sorted(self.edges)
        header = ["minute", "start_ms", "duration_ms", "availability", "performance", "performance_clamped",
                  "quality", "oee", "q_total", "q_good", "q_bad", "t_downtime_s", "reason"]
        for e in edge_ids:
            header += [f"edge{e}_count", f"edge{e}_cumulative", f"edge{e}_camera", f"edge{e}_throughput",
                       f"edge{e}_throughput_smoothed", f"edge{e}_speed_mps"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for i, m in enumerate(self.minutes):
            row = [m[k] for k in header[:13]]
            for e in edge_ids:
                col = self.edges[e]
                row += [col["counts"][i], col["cumulative"][i], col["active_camera"][i], col["throughput"][i],
                        col["throughput_smoothed"][i], col["speed_mps"][i]]
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
        return buf.getvalue()

    def write(self, out_dir, tracks: bool = True) -> Dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"report": out / "report.json", "minutes": out / "report_minutes.csv"}
        paths["report"].write_text(self.to_json() + "\n", encoding="utf-8")
        paths["minutes"].write_text(self.to_csv(), encoding="utf-8")
        if tracks and self.snapshots is not None:
            paths["tracks"] = out / "tracks.jsonl"
            write_tracks(paths["tracks"], self.snapshots)
        return paths


def load_report(path) -> Report:
    p = Path(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"report: invalid JSON ({exc.msg})") from None
    rep = Report.from_dict(doc)
    tracks = p.with_name("tracks.jsonl")
    if tracks.exists():
        rep.snapshots = read_tracks(tracks)
    return rep


def write_tracks(path, snapshots: Mapping[int, Sequence[TrackSnapshot]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cam in sorted(snapshots):
            for s in snapshots[cam]:
                fh.write(json.dumps({"t_ms": s.time, "cam": s.camera, "track": s.track_id,
                                     "bbox": list(s.bbox.as_tuple()), "conf": s.confidence}) + "\n")


def read_tracks(path) -> Dict[int, List[TrackSnapshot]]:
    out: Dict[int, List[TrackSnapshot]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            s = TrackSnapshot(int(r["t_ms"]), int(r["cam"]), int(r["track"]), BoundingBox(*r["bbox"]),
                              float(r["conf"]))
            out.setdefault(s.camera, []).append(s)
    return out


# -------------------------------------------------------------------- stages


def session_duration(sensor: Optional[SensorSeries], ledger: Optional[GroundTruthLedger],
                     detections: Sequence[Detection]) -> int:
    """Session length: ledger if known, else the sensor span, else the last detection."""
    if ledger is not None and ledger.duration_ms is not None:
        return ledger.duration_ms
    if sensor is not None and len(sensor):
        return int(sensor.time_ms[-1]) + sensor.sample_period_ms
    if detections:
        return max(d.time for d in detections) + 1
    raise ValidationError("session: cannot determine session length from empty inputs")


def availability_signal(sensor: Optional[SensorSeries], ledger: Optional[GroundTruthLedger], duration_ms: int,
                        cfg: AvailabilityConfig):
    """Run/stop signal from the sensor stream, falling back to the ledger's stops."""
    if sensor is not None and len(sensor):
        clf = RunStopClassifier.from_config(cfg)
        return clf.fit_predict(sensor, session=(0, duration_ms)), "sensor"
    if ledger is not None:
        return RunStopSignal.from_stop_intervals(ledger.stop_intervals, 0, duration_ms), "ledger"
    raise ValidationError(NO_AVAILABILITY_SOURCE)


def _breakdown_row(m: int, b: OeeBreakdown) -> dict:
    c = b.counts
    return {
        "minute": m,
        "start_ms": m * MS_PER_MINUTE,
        "duration_ms": b.t_planned_ms,
        "availability": b.availability,
        "performance": b.performance,
        "performance_clamped": b.performance_clamped,
        "quality": b.quality,
        "oee": b.oee,
        "q_total": None if c is None else c.q_total,
        "q_good": None if c is None else c.q_good,
        "q_bad": None if c is None else c.q_bad,
        "t_downtime_s": b.t_downtime,
        "reason": b.reason,
    }


def _session_block(b: OeeBreakdown) -> dict:
    c = b.counts or PieceCounts(0, 0, 0)
    return {
        "availability": b.availability,
        "performance": b.performance,
        "performance_clamped": b.performance_clamped,
        "quality": b.quality,
        "oee": b.oee,
        "oee_clamped": b.oee_clamped,
        "t_planned_s": b.t_planned,
        "t_operating_s": b.t_operating,
        "t_downtime_s": b.t_downtime,
        "tau_ideal_s": b.tau_ideal,
        "counts": {"q_good": c.q_good, "q_bad": c.q_bad, "q_total": c.q_total, "imbalance": c.imbalance},
        "reason": b.reason,
    }


def _edge_block(series: EdgeCountSeries, speed, window: int) -> dict:
    return {
        "counts": list(series.counts),
        "cumulative": series.cumulative,
        "active_camera": list(series.active_camera),
        "throughput": throughput(series),
        "throughput_smoothed": throughput(series, window),
        "speed_mps": list(speed.median_mps) if speed is not None else [None] * len(series.counts),
        "speed_reason": None if speed is None else speed.reason,
    }


def assemble_report(
    topology: LineTopology,
    series: Mapping[int, EdgeCountSeries],
    kpis: KpiSeries,
    downtime: Sequence[Sequence[int]],
    duration_ms: int,
    source: str,
    speeds: Optional[Mapping[int, object]] = None,
    window: int = 5,
    snapshots=None,
    extra_flags: Optional[dict] = None,
) -> Report:
    total_edge, good_edge = topology.edges[0].edge_id, topology.edges[-1].edge_id
    flags = dict(kpis.flags)
    flags["partial_final_minute"] = duration_ms % MS_PER_MINUTE != 0
    flags.update(extra_flags or {})
    return Report(
        duration_ms=duration_ms,
        tau_ideal=topology.ideal_cycle_time_s,
        total_edge=total_edge,
        good_edge=good_edge,
        session=_session_block(kpis.session),
        minutes=[_breakdown_row(m, b) for m, b in enumerate(kpis.minutes)],
        edges={eid: _edge_block(s, (speeds or {}).get(eid), window) for eid, s in series.items()},
        downtime=[list(map(int, iv)) for iv in downtime],
        flags=flags,
        availability_source=source,
        snapshots=snapshots,
    )


def replay(
    detections: Iterable[Detection],
    topology: LineTopology,
    sensor: Optional[SensorSeries] = None,
    ledger: Optional[GroundTruthLedger] = None,
    config: Optional[PipelineConfig] = None,
) -> Report:
    """Track, count, classify availability and compute KPIs for one session.

    Availability comes from ``sensor`` when given, else from the ledger's stop
    intervals; with neither a :class:`ValidationError` is raised.
    """
    cfg = config or PipelineConfig()
    dets = detections if isinstance(detections, list) else list(detections)
    duration = session_duration(sensor, ledger, dets)
    signal, source = availability_signal(sensor, ledger, duration, cfg.availability)
    stops = signal.intervals_within(STOPPED, 0, duration)
    log.info("availability from %s: %d stops", source, len(stops))

    with gc_paused():
        dets.sort(key=lambda d: (d.camera, d.time))
        frames = group_frames(dets)
        wanted = set(topology.cameras)
        frames = {cam: fr for cam, fr in frames.items() if cam in wanted}
        det_times = {cam: np.array([t for t, _ in fr], dtype=np.int64) for cam, fr in frames.items()}
        snapshots = track_all_cameras(frames, cfg.tracker)
    log.info("tracked %d cameras", len(snapshots))

    series: Dict[int, EdgeCountSeries] = {}
    speeds = {}
    for edge in topology.edges:
        events = {
            tw.camera: detect_crossings(snapshots.get(tw.camera, ()), tw, edge.edge_id, cfg.refractory_ms)
            for tw in edge.tripwires
        }
        series[edge.edge_id] = fuse_edge_counts(events, edge, signal, det_times, duration)
        speeds[edge.edge_id] = estimate_speed(series[edge.edge_id].events, edge, duration)

    total, good = series[topology.edges[0].edge_id], series[topology.edges[-1].edge_id]
    minute_counts = counts_from_edges(total, good)
    session_counts = PieceCounts.from_total_and_good(total.total(), good.total())
    kpis = compute_kpis(minute_counts, stops, duration, topology.ideal_cycle_time_s,
                        _planned_ms(topology), session_counts)
    return assemble_report(topology, series, kpis, stops, duration, source, speeds, cfg.smoothing_window,
                           snapshots)


def _planned_ms(topology: LineTopology) -> Optional[int]:
    p = topology.planned_production_time_s
    return None if p is None else int(round(p * 1000))


def report_from_ledger(ledger: GroundTruthLedger, topology: LineTopology, window: int = 5) -> Report:
    """A report built from ground truth alone; evaluating it against its ledger gives zero error."""
    if ledger.duration_ms is None:
        raise ValidationError("duration_ms: ledger has no session duration")
    duration = ledger.duration_ms
    series = {
        e.edge_id: EdgeCountSeries.from_times(e.edge_id, [t for t, _ in ledger.reference_passes.get(e.edge_id, [])],
                                              duration)
        for e in topology.edges
    }
    for e in topology.edges:
        top = e.by_priority()[0].camera if e.tripwires else None
        series[e.edge_id].active_camera = [top] * len(series[e.edge_id].counts)
    snapshots = None
    if ledger.per_frame_truth is not None:
        snapshots = {}
        for f in ledger.per_frame_truth:
            ids = f.piece_ids or tuple(range(len(f.boxes)))
            snapshots.setdefault(f.camera, []).extend(
                TrackSnapshot(f.time, f.camera, pid, box, 1.0) for pid, box in zip(ids, f.boxes)
            )
    kpis = ledger_kpis(ledger, topology.ideal_cycle_time_s, topology.edges[0].edge_id, _planned_ms(topology))
    return assemble_report(topology, series, kpis, ledger.stop_intervals, duration, "ledger", window=window,
                           snapshots=snapshots)
