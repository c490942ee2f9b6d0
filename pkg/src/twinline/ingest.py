"""Readers, writers and stream merging for the engine's file formats.

Formats
-------
Detections
    One JSON object per line:
    ``{"t_ms": int, "cam": int, "bbox": [x_min, y_min, x_max, y_max], "conf": float, "class": str}``
Sensor CSV
    Header row with ``time_ms, ax, ay, az`` required and
    ``gx, gy, gz, mx, my, mz, pressure_hpa, temp_c, humidity_rh, co2_ppm`` optional.
Topology
    TOML, see ``docs`` section of the README and ``data/line.toml``.
Ledger
    A single JSON document, see :class:`GroundTruthLedger`.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from ._validation import (
    ValidationError,
    check_intervals,
    check_positive,
)
from .core import BoundingBox, Detection, LineSegment2D, Timestamp

try:  # pragma: no cover - version dependent
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib
import tomli_w

log = logging.getLogger(__name__)

PathLike = Union[str, Path]

SENSOR_REQUIRED = ("time_ms", "ax", "ay", "az")
SENSOR_OPTIONAL = (
    "gx", "gy", "gz", "mx", "my", "mz",
    "pressure_hpa", "temp_c", "humidity_rh", "co2_ppm",
)
SENSOR_COLUMNS = SENSOR_REQUIRED + SENSOR_OPTIONAL
_DETECTION_KEYS = {"t_ms", "cam", "bbox", "conf", "class"}


class ParseError(ValidationError):
    """Malformed input, with the 1-based line or row number where it happened."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


# ---------------------------------------------------------------- detections


def parse_detection(record: dict) -> Detection:
    try:
        bbox = record["bbox"]
        if len(bbox) != 4:
            raise ValidationError("bbox: expected 4 coordinates")
        t = record["t_ms"]
        cam = record["cam"]
        if isinstance(t, bool) or not isinstance(t, int):
            raise ValidationError(f"t_ms: expected integer milliseconds, got {t!r}")
        if isinstance(cam, bool) or not isinstance(cam, int):
            raise ValidationError(f"cam: expected integer camera id, got {cam!r}")
        return Detection(
            time=t,
            camera=cam,
            bbox=BoundingBox(*(float(v) for v in bbox)),
            confidence=float(record["conf"]),
            class_label=str(record.get("class", "box")),
        )
    except KeyError as exc:
        raise ValidationError(f"{exc.args[0]}: missing required field") from None
    except TypeError as exc:
        raise ValidationError(f"record: {exc}") from None


def detection_to_record(det: Detection) -> dict:
    return {
        "t_ms": det.time,
        "cam": det.camera,
        "bbox": list(det.bbox.as_tuple()),
        "conf": det.confidence,
        "class": det.class_label,
    }


@dataclass
class ReadResult:
    """Parsed records plus the number of tolerated irregularities."""

    items: list
    warnings: int = 0

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i):
        return self.items[i]


def _iter_detection_lines(lines: Iterable[str]) -> Iterator[Tuple[int, dict]]:
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(rec, dict):
            raise ParseError("expected a JSON object", lineno)
        yield lineno, rec


def read_detections(path: PathLike) -> ReadResult:
    """Read one detection file. Unknown fields are ignored and counted."""
    out: List[Detection] = []
    warnings = 0
    last_t: Dict[int, int] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, rec in _iter_detection_lines(fh):
            if len(rec) > len(_DETECTION_KEYS) or not rec.keys() <= _DETECTION_KEYS:
                warnings += len(rec.keys() - _DETECTION_KEYS)
            try:
                det = parse_detection(rec)
            except ValidationError as exc:
                raise ParseError(str(exc), lineno) from None
            prev = last_t.get(det.camera)
            if prev is not None and det.time < prev:
                raise ParseError(
                    f"t_ms: non-monotone timestamp for camera {det.camera} ({prev} > {det.time})",
                    lineno,
                )
            last_t[det.camera] = det.time
            out.append(det)
    if warnings:
        log.warning("%s: ignored %d unknown detection fields", path, warnings)
    return ReadResult(out, warnings)


def read_detection_inputs(paths: Sequence[PathLike]) -> ReadResult:
    """Read detection files and directories (every ``*.jsonl`` inside)."""
    files: List[Path] = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(p.glob("*.jsonl")))
        else:
            files.append(p)
    items: List[Detection] = []
    warnings = 0
    for f in files:
        res = read_detections(f)
        items.extend(res.items)
        warnings += res.warnings
    return ReadResult(items, warnings)


def write_detections(path: PathLike, detections: Iterable[Detection]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for det in detections:
            fh.write(json.dumps(detection_to_record(det), separators=(",", ":")))
            fh.write("\n")


def group_frames(detections: Iterable[Detection], epsilon_ms: int = 1) -> Dict[int, List[Tuple[int, List[Detection]]]]:
    """Group detections into per-camera frames.

    Consecutive detections of a camera at most ``epsilon_ms`` after the
    frame's first detection share that frame and its time.
    """
    frames: Dict[int, List[Tuple[int, List[Detection]]]] = {}
    open_frame: Dict[int, Tuple[int, List[Detection]]] = {}
    for det in detections:
        cam, t = det.camera, det.time
        cur = open_frame.get(cam)
        if cur is not None and t - cur[0] <= epsilon_ms:
            cur[1].append(det)
        else:
            cur = open_frame[cam] = (t, [det])
            frames.setdefault(cam, []).append(cur)
    return frames


# -------------------------------------------------------------------- sensor


@dataclass(frozen=True)
class SensorSample:
    time: Timestamp
    accel: Tuple[float, float, float]
    gyro: Optional[Tuple[float, float, float]] = None
    mag: Optional[Tuple[float, float, float]] = None
    pressure: Optional[float] = None
    temperature: Optional[float] = None
    humidity: Optional[float] = None
    co2: Optional[float] = None


def _opt(v: float) -> Optional[float]:
    return None if math.isnan(v) else float(v)


def _opt3(row: np.ndarray) -> Optional[Tuple[float, float, float]]:
    if np.isnan(row).any():
        return None
    return (float(row[0]), float(row[1]), float(row[2]))


class SensorSeries(Sequence[SensorSample]):
    """Columnar store of motor sensor samples, sorted by time.

    Indexing yields :class:`SensorSample` values; the arrays are exposed for
    vectorised consumers. Absent optional channels hold NaN.
    """

    def __init__(self, time_ms, accel, extra=None, warnings: int = 0, reordered: int = 0):
        time_ms = np.asarray(time_ms, dtype=np.int64)
        accel = np.asarray(accel, dtype=float).reshape(-1, 3)
        if extra is None:
            extra = np.full((len(time_ms), len(SENSOR_OPTIONAL)), np.nan)
        extra = np.asarray(extra, dtype=float).reshape(-1, len(SENSOR_OPTIONAL))
        if not (len(time_ms) == len(accel) == len(extra)):
            raise ValidationError("sensor: column lengths differ")
        if not np.isfinite(accel).all():
            raise ValidationError("accel: components must be finite")
        if len(time_ms) and time_ms.min() < 0:
            raise ValidationError("time_ms: negative timestamp")
        if len(time_ms) > 1 and np.any(np.diff(time_ms) < 0):
            order = np.argsort(time_ms, kind="stable")
            reordered += int(np.count_nonzero(order != np.arange(len(order))))
            time_ms, accel, extra = time_ms[order], accel[order], extra[order]
        self.time_ms = time_ms
        self.accel = accel
        self.extra = extra
        self.warnings = warnings + (1 if reordered else 0)
        self.reordered = reordered

    def __len__(self) -> int:
        return len(self.time_ms)

    def __getitem__(self, i):
        if isinstance(i, (slice, np.ndarray, list)):
            return SensorSeries(self.time_ms[i], self.accel[i], self.extra[i])
        e = self.extra[i]
        a = self.accel[i]
        return SensorSample(
            time=int(self.time_ms[i]),
            accel=(float(a[0]), float(a[1]), float(a[2])),
            gyro=_opt3(e[0:3]),
            mag=_opt3(e[3:6]),
            pressure=_opt(e[6]),
            temperature=_opt(e[7]),
            humidity=_opt(e[8]),
            co2=_opt(e[9]),
        )

    @classmethod
    def from_samples(cls, samples: Iterable[SensorSample]) -> "SensorSeries":
        samples = list(samples)
        t = [s.time for s in samples]
        acc = [s.accel for s in samples]
        extra = np.full((len(samples), len(SENSOR_OPTIONAL)), np.nan)
        for i, s in enumerate(samples):
            if s.gyro is not None:
                extra[i, 0:3] = s.gyro
            if s.mag is not None:
                extra[i, 3:6] = s.mag
            for j, v in enumerate((s.pressure, s.temperature, s.humidity, s.co2)):
                if v is not None:
                    extra[i, 6 + j] = v
        return cls(t, np.asarray(acc, dtype=float).reshape(-1, 3), extra)

    @property
    def magnitude(self) -> np.ndarray:
        return np.sqrt(np.einsum("ij,ij->i", self.accel, self.accel))

    def scaled(self, factor: float) -> "SensorSeries":
        """Copy with accelerations multiplied by ``factor``."""
        return SensorSeries(self.time_ms, self.accel * factor, self.extra)

    @property
    def sample_period_ms(self) -> int:
        if len(self.time_ms) < 2:
            return 0
        return int(np.median(np.diff(self.time_ms)))


def read_sensor_csv(path: PathLike) -> SensorSeries:
    """Parse a sensor CSV. Rows out of time order are re-sorted and counted."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return _parse_sensor_csv(fh, str(path))


def _parse_sensor_csv(fh, name: str) -> SensorSeries:
    reader = csv.reader(fh)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ValidationError(f"{name}: missing header row") from None
    missing = [c for c in SENSOR_REQUIRED if c not in header]
    if missing:
        raise ValidationError(f"{missing[0]}: required column missing from {name}")
    index = {c: i for i, c in enumerate(header)}
    unknown = [c for c in header if c not in SENSOR_COLUMNS]
    opt_idx = [index.get(c) for c in SENSOR_OPTIONAL]
    times: List[int] = []
    accel: List[Tuple[float, float, float]] = []
    extra: List[List[float]] = []
    ia, iy, iz, it = index["ax"], index["ay"], index["az"], index["time_ms"]
    for rowno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            t = int(row[it])
            acc = (float(row[ia]), float(row[iy]), float(row[iz]))
            ex = [
                float(row[j]) if j is not None and j < len(row) and row[j].strip() != "" else math.nan
                for j in opt_idx
            ]
        except (ValueError, IndexError) as exc:
            raise ParseError(f"unparsable cell ({exc})", rowno) from None
        if not all(math.isfinite(v) for v in acc):
            raise ParseError("accel: components must be finite", rowno)
        times.append(t)
        accel.append(acc)
        extra.append(ex)
    warnings = len(unknown)
    if unknown:
        log.warning("%s: ignored unknown sensor columns %s", name, unknown)
    series = SensorSeries(
        np.asarray(times, dtype=np.int64),
        np.asarray(accel, dtype=float).reshape(-1, 3),
        np.asarray(extra, dtype=float).reshape(-1, len(SENSOR_OPTIONAL)),
        warnings=warnings,
    )
    if series.reordered:
        log.warning("%s: %d sensor rows were out of time order and re-sorted", name, series.reordered)
    return series


def write_sensor_csv(path: PathLike, series: SensorSeries) -> None:
    present = [j for j in range(len(SENSOR_OPTIONAL)) if not np.isnan(series.extra[:, j]).all()]
    cols = list(SENSOR_REQUIRED) + [SENSOR_OPTIONAL[j] for j in present]
    buf = io.StringIO()
    buf.write(",".join(cols) + "\n")
    data = np.column_stack([series.accel] + [series.extra[:, j] for j in present]) if len(series) else None
    for i in range(len(series)):
        vals = [repr(float(v)) if not math.isnan(v) else "" for v in data[i]]
        buf.write(f"{int(series.time_ms[i])}," + ",".join(vals) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# ------------------------------------------------------------------ topology


@dataclass(frozen=True)
class Tripwire:
    """Counting wire seen by one camera on one edge.

    ``wire`` is the counting line, oriented so production flow crosses it with
    sign +1. ``wire_b`` is the optional second line downstream, ``gap_m``
    meters further along the belt, used for speed estimation.
    """

    camera: int
    wire: LineSegment2D
    priority: int
    wire_b: Optional[LineSegment2D] = None
    gap_m: float = 0.0

    @property
    def wires(self) -> List[LineSegment2D]:
        return [self.wire] if self.wire_b is None else [self.wire, self.wire_b]


@dataclass(frozen=True)
class Edge:
    edge_id: int
    from_node: int
    to_node: int
    tripwires: Tuple[Tripwire, ...]

    def by_priority(self) -> List[Tripwire]:
        return sorted(self.tripwires, key=lambda tw: tw.priority)


@dataclass(frozen=True)
class LineTopology:
    nodes: Tuple[Tuple[int, str], ...]
    edges: Tuple[Edge, ...]
    ideal_cycle_time_s: float
    planned_production_time_s: Optional[float] = None

    def __post_init__(self):
        validate_topology(self)

    def edge(self, edge_id: int) -> Edge:
        for e in self.edges:
            if e.edge_id == edge_id:
                return e
        raise KeyError(edge_id)

    @property
    def cameras(self) -> List[int]:
        return sorted({tw.camera for e in self.edges for tw in e.tripwires})


def validate_topology(topo: LineTopology) -> None:
    check_positive(topo.ideal_cycle_time_s, "ideal_cycle_time_s")
    if topo.planned_production_time_s is not None:
        check_positive(topo.planned_production_time_s, "planned_production_time_s")
    node_ids = [n for n, _ in topo.nodes]
    if len(set(node_ids)) != len(node_ids):
        raise ValidationError("nodes: duplicate node id")
    edge_ids = [e.edge_id for e in topo.edges]
    if len(set(edge_ids)) != len(edge_ids):
        raise ValidationError("edges: duplicate edge id")
    for e in topo.edges:
        for n in (e.from_node, e.to_node):
            if n not in node_ids:
                raise ValidationError(f"edges: edge {e.edge_id} references unknown node {n}")
        if not e.tripwires:
            raise ValidationError(f"tripwires: edge {e.edge_id} has no tripwire")
        prios = [tw.priority for tw in e.tripwires]
        if len(set(prios)) != len(prios):
            raise ValidationError(f"tripwires: duplicate priority on edge {e.edge_id}")
        for tw in e.tripwires:
            if tw.wire_b is not None:
                check_positive(tw.gap_m, "gap_m")


def _seg(v, name: str) -> LineSegment2D:
    try:
        (ax, ay), (bx, by) = v
        return LineSegment2D((float(ax), float(ay)), (float(bx), float(by)))
    except (TypeError, ValueError):
        raise ValidationError(f"{name}: expected [[x, y], [x, y]]") from None


def topology_from_dict(doc: dict) -> LineTopology:
    try:
        nodes = tuple((int(n["id"]), str(n.get("name", ""))) for n in doc.get("nodes", []))
        edges = []
        for e in doc.get("edges", []):
            tws = []
            for tw in e.get("tripwires", []):
                tws.append(
                    Tripwire(
                        camera=int(tw["camera"]),
                        wire=_seg(tw["wire"], "wire"),
                        priority=int(tw["priority"]),
                        wire_b=_seg(tw["wire_b"], "wire_b") if "wire_b" in tw else None,
                        gap_m=float(tw.get("gap_m", 0.0)),
                    )
                )
            edges.append(Edge(int(e["id"]), int(e["from"]), int(e["to"]), tuple(tws)))
        return LineTopology(
            nodes=nodes,
            edges=tuple(edges),
            ideal_cycle_time_s=float(doc["ideal_cycle_time_s"]),
            planned_production_time_s=(
                float(doc["planned_production_time_s"]) if "planned_production_time_s" in doc else None
            ),
        )
    except KeyError as exc:
        raise ValidationError(f"{exc.args[0]}: missing required key in topology") from None


def topology_to_dict(topo: LineTopology) -> dict:
    doc: dict = {"ideal_cycle_time_s": topo.ideal_cycle_time_s}
    if topo.planned_production_time_s is not None:
        doc["planned_production_time_s"] = topo.planned_production_time_s
    doc["nodes"] = [{"id": n, "name": name} for n, name in topo.nodes]
    doc["edges"] = []
    for e in topo.edges:
        tws = []
        for tw in e.tripwires:
            d = {"camera": tw.camera, "priority": tw.priority, "wire": [list(tw.wire.a), list(tw.wire.b)]}
            if tw.wire_b is not None:
                d["wire_b"] = [list(tw.wire_b.a), list(tw.wire_b.b)]
                d["gap_m"] = tw.gap_m
            tws.append(d)
        doc["edges"].append({"id": e.edge_id, "from": e.from_node, "to": e.to_node, "tripwires": tws})
    return doc


def load_topology(path: PathLike) -> LineTopology:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"topology: {exc}") from None
    return topology_from_dict(doc)


def dump_topology(path: PathLike, topo: LineTopology) -> None:
    Path(path).write_text(tomli_w.dumps(topology_to_dict(topo)), encoding="utf-8")


# -------------------------------------------------------------------- ledger


@dataclass(frozen=True)
class FrameTruth:
    time: Timestamp
    camera: int
    boxes: Tuple[BoundingBox, ...]
    piece_ids: Tuple[int, ...] = ()


@dataclass
class GroundTruthLedger:
    """Exact record of what happened on the line.

    ``reference_passes`` maps an edge id to the times pieces passed that
    edge's counting reference position; ``duration_ms`` is the session length.
    """

    injections: List[Tuple[Timestamp, int]] = field(default_factory=list)
    removals_at_qa: List[Tuple[Timestamp, int]] = field(default_factory=list)
    exits: List[Tuple[Timestamp, int]] = field(default_factory=list)
    stop_intervals: List[Tuple[Timestamp, Timestamp]] = field(default_factory=list)
    per_frame_truth: Optional[List[FrameTruth]] = None
    reference_passes: Dict[int, List[Tuple[Timestamp, int]]] = field(default_factory=dict)
    duration_ms: Optional[int] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        check_intervals(self.stop_intervals, "stop_intervals")
        injected = {pid for _, pid in self.injections}
        for name, events in (("removals_at_qa", self.removals_at_qa), ("exits", self.exits)):
            for _, pid in events:
                if pid not in injected:
                    raise ValidationError(f"{name}: piece {pid} was never injected")

    def events(self) -> List["LedgerEvent"]:
        out = [LedgerEvent(t, "injection", p) for t, p in self.injections]
        out += [LedgerEvent(t, "removal", p) for t, p in self.removals_at_qa]
        out += [LedgerEvent(t, "exit", p) for t, p in self.exits]
        out.sort(key=lambda e: e.time)
        return out


@dataclass(frozen=True)
class LedgerEvent:
    time: Timestamp
    kind: str
    piece_id: int


def ledger_to_dict(ledger: GroundTruthLedger) -> dict:
    doc = {
        "duration_ms": ledger.duration_ms,
        "injections": [list(x) for x in ledger.injections],
        "removals_at_qa": [list(x) for x in ledger.removals_at_qa],
        "exits": [list(x) for x in ledger.exits],
        "stop_intervals": [list(x) for x in ledger.stop_intervals],
        "reference_passes": {str(k): [list(x) for x in v] for k, v in sorted(ledger.reference_passes.items())},
    }
    if ledger.per_frame_truth is not None:
        doc["per_frame_truth"] = [
            {
                "t_ms": f.time,
                "cam": f.camera,
                "boxes": [list(b.as_tuple()) for b in f.boxes],
                "ids": list(f.piece_ids),
            }
            for f in ledger.per_frame_truth
        ]
    return doc


def ledger_from_dict(doc: dict) -> GroundTruthLedger:
    def pairs(key):
        return [(int(a), int(b)) for a, b in doc.get(key, [])]

    pft = None
    if doc.get("per_frame_truth") is not None:
        pft = [
            FrameTruth(
                int(f["t_ms"]),
                int(f["cam"]),
                tuple(BoundingBox(*map(float, b)) for b in f["boxes"]),
                tuple(int(i) for i in f.get("ids", [])),
            )
            for f in doc["per_frame_truth"]
        ]
    try:
        return GroundTruthLedger(
            injections=pairs("injections"),
            removals_at_qa=pairs("removals_at_qa"),
            exits=pairs("exits"),
            stop_intervals=pairs("stop_intervals"),
            per_frame_truth=pft,
            reference_passes={
                int(k): [(int(a), int(b)) for a, b in v] for k, v in doc.get("reference_passes", {}).items()
            },
            duration_ms=None if doc.get("duration_ms") is None else int(doc["duration_ms"]),
        )
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"ledger: {exc}") from None


def load_ledger(path: PathLike) -> GroundTruthLedger:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"ledger: invalid JSON ({exc.msg})", exc.lineno) from None
    return ledger_from_dict(doc)


def dump_ledger(path: PathLike, ledger: GroundTruthLedger) -> None:
    Path(path).write_text(json.dumps(ledger_to_dict(ledger), separators=(",", ":")), encoding="utf-8")


# --------------------------------------------------------------------- merge

_KIND_RANK = {"sensor": 0, "detection": 1, "ledger": 2}


@dataclass(frozen=True)
class MergedEvent:
    time: Timestamp
    kind: str
    payload: Union[Detection, SensorSample, LedgerEvent]


def merge_streams(
    dets: Iterable[Detection],
    sensors: Iterable[SensorSample],
    ledger_events: Iterable[LedgerEvent] = (),
) -> List[MergedEvent]:
    """Stable k-way merge of individually time-sorted streams.

    Ties are ordered sensor before detection before ledger, then by camera id.
    """
    def keyed(kind, items, cam_of):
        for seq, item in enumerate(items):
            yield (item.time, _KIND_RANK[kind], cam_of(item), seq), MergedEvent(item.time, kind, item)

    streams = [
        keyed("sensor", sensors, lambda s: 0),
        keyed("detection", dets, lambda d: d.camera),
        keyed("ledger", ledger_events, lambda e: 0),
    ]
    # Per-camera subsequences are sorted but the detection stream as a whole
    # may interleave cameras out of order, so sort it before merging.
    det_sorted = sorted(streams[1], key=lambda kv: kv[0])
    streams[1] = iter(det_sorted)
    return [ev for _, ev in heapq.merge(*streams, key=lambda kv: kv[0])]
