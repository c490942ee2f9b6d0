"""Conveyor loop simulator producing detections, motor sensor data and a ledger.

The belt is a 1-D coordinate in meters. Pieces enter at the start node, the
defective ones vanish at the inspection node, the rest leave at the end node.
Each camera projects belt position linearly to pixels and sees the belt
interval ``fov_m``. Motion is exact: a piece's position is the belt speed
times the running time elapsed since its injection, so event times are
computed in closed form rather than by stepping.

Random draws come from one seeded ``numpy`` generator in a fixed order:
stochastic stops, defect flags (piece order), sensor noise, then detection
noise camera by camera (misses, jitter, confidences, false-positive counts,
false-positive boxes, false-positive confidences).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ._validation import (
    ValidationError,
    check_intervals,
    check_non_negative,
    check_positive,
    check_probability,
)
from .core import BoundingBox, Detection, LineSegment2D, ceil_ms, gc_paused
from .ingest import (
    SENSOR_OPTIONAL,
    Edge,
    FrameTruth,
    GroundTruthLedger,
    LineTopology,
    SensorSeries,
    Tripwire,
    dump_ledger,
    dump_topology,
    tomli_w,
    tomllib,
    write_detections,
    write_sensor_csv,
)
from .kpi import KpiSeries, ledger_kpis

GRAVITY = 9.81
_MOUNT = np.array([0.05, -0.10, 1.0]) / np.linalg.norm([0.05, -0.10, 1.0])


@dataclass(frozen=True)
class NoiseModel:
    miss_probability: float = 0.0
    bbox_jitter_px: float = 0.0
    false_positive_rate_per_frame: float = 0.0
    confidence_mean: float = 0.9
    confidence_std: float = 0.0
    merge_gap_fraction: float = 0.0

    def __post_init__(self):
        check_probability(self.miss_probability, "miss_probability")
        check_non_negative(self.bbox_jitter_px, "bbox_jitter_px")
        check_non_negative(self.false_positive_rate_per_frame, "false_positive_rate_per_frame")
        check_probability(self.confidence_mean, "confidence_mean")
        check_non_negative(self.confidence_std, "confidence_std")
        check_non_negative(self.merge_gap_fraction, "merge_gap_fraction")


@dataclass(frozen=True)
class CameraLayout:
    """Linear belt-to-image projection for one camera.

    A point at belt position ``s`` meters maps to
    ``(x0_px + px_per_m * s, y0_px + y_per_m * s)``.
    """

    id: int
    x0_px: float
    px_per_m: float
    y0_px: float
    fov_m: Tuple[float, float]
    edges: Tuple[Tuple[int, int], ...]  # (edge_id, priority)
    fps: Optional[float] = None
    y_per_m: float = 0.0
    box_height_px: float = 30.0
    image_size: Tuple[int, int] = (1280, 720)
    active_until_s: Optional[float] = None

    def __post_init__(self):
        if self.id < 1:
            raise ValidationError("cameras.id: must be >= 1")
        check_positive(self.px_per_m, "px_per_m")
        if not self.fov_m[0] < self.fov_m[1]:
            raise ValidationError("fov_m: empty field of view")
        if self.fps is not None:
            check_positive(self.fps, "fps")

    def project(self, s):
        return self.x0_px + self.px_per_m * s, self.y0_px + self.y_per_m * s

    def sees(self, s: float) -> bool:
        return self.fov_m[0] <= s <= self.fov_m[1]


@dataclass(frozen=True)
class EdgeLayout:
    id: int
    from_node: int
    to_node: int
    reference_m: float
    gap_m: float = 0.5


@dataclass(frozen=True)
class DenseWindow:
    """Interval during which pieces are placed in tight clusters."""

    start_s: float
    end_s: float
    cluster_size: int = 2
    cluster_gap_m: float = 0.002
    cluster_period_s: float = 0.7


@dataclass(frozen=True)
class Scenario:
    duration_s: float = 600.0
    tick_hz: float = 30.0
    belt_speed_mps: float = 0.25
    loop_length_m: float = 6.0
    node_positions_m: Tuple[float, float, float] = (0.0, 2.0, 4.0)
    box_length_m: float = 0.08
    injection_period_s: float = 1.1
    injection_end_s: Optional[float] = None
    ideal_cycle_time_s: float = 1.1
    defect_probability: float = 0.0
    stops: Tuple[Tuple[float, float], ...] = ()
    stochastic_stops: Optional[Tuple[float, float]] = None  # (mean interval s, mean duration s)
    noise: NoiseModel = field(default_factory=NoiseModel)
    edges: Tuple[EdgeLayout, ...] = ()
    cameras: Tuple[CameraLayout, ...] = ()
    dense: Optional[DenseWindow] = None
    sensor_hz: float = 100.0
    sigma_run: float = 0.5
    sigma_stop: float = 0.02
    record_frame_truth: bool = False
    rng_seed: int = 0

    def __post_init__(self):
        check_positive(self.duration_s, "duration_s")
        check_positive(self.tick_hz, "tick_hz")
        check_positive(self.belt_speed_mps, "belt_speed_mps")
        check_positive(self.injection_period_s, "injection_period_s")
        check_positive(self.ideal_cycle_time_s, "ideal_cycle_time_s")
        check_positive(self.sensor_hz, "sensor_hz")
        check_probability(self.defect_probability, "defect_probability")
        n1, n2, n3 = self.node_positions_m
        if not 0 <= n1 < n2 < n3 <= self.loop_length_m:
            raise ValidationError("node_positions_m: nodes must be ordered along the loop")
        check_intervals(self.stops, "stops")
        for a, b in self.stops:
            if a < 0 or b > self.duration_s:
                raise ValidationError("stops: interval outside [0, duration_s]")
        if not self.edges:
            raise ValidationError("edges: scenario needs at least one edge")
        if not self.cameras:
            raise ValidationError("cameras: scenario needs at least one camera")
        if len({c.id for c in self.cameras}) != len(self.cameras):
            raise ValidationError("cameras: duplicate camera id")

    @property
    def duration_ms(self) -> int:
        return int(round(self.duration_s * 1000))

    @property
    def transit_time_s(self) -> float:
        """Start-to-exit travel time while running."""
        return (self.node_positions_m[2] - self.node_positions_m[0]) / self.belt_speed_mps

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, rng_seed=seed)

    def topology(self) -> LineTopology:
        """Line topology with one tripwire per (camera, edge) the camera watches."""
        nodes = ((1, "Start"), (2, "Quality Assurance"), (3, "End"))
        edges = []
        for e in self.edges:
            tws = []
            for cam in self.cameras:
                for eid, prio in cam.edges:
                    if eid != e.id:
                        continue
                    wire = _vertical_wire(cam, e.reference_m)
                    wire_b = None
                    if cam.sees(e.reference_m + e.gap_m) and e.gap_m > 0:
                        wire_b = _vertical_wire(cam, e.reference_m + e.gap_m)
                    tws.append(Tripwire(cam.id, wire, prio, wire_b, e.gap_m if wire_b else 0.0))
            edges.append(Edge(e.id, e.from_node, e.to_node, tuple(tws)))
        return LineTopology(nodes, tuple(edges), self.ideal_cycle_time_s)


def _vertical_wire(cam: CameraLayout, s: float) -> LineSegment2D:
    # a -> b points against the image y axis so flow in +x crosses with sign +1
    x, y = cam.project(s)
    h = cam.box_height_px
    return LineSegment2D((float(x), float(y + h)), (float(x), float(y - h)))


@dataclass
class SimOutput:
    scenario: Scenario
    detections: Dict[int, List[Detection]]
    sensor: SensorSeries
    ledger: GroundTruthLedger
    defective: np.ndarray = field(repr=False, default=None)

    @property
    def topology(self) -> LineTopology:
        return self.scenario.topology()

    def all_detections(self) -> List[Detection]:
        return [d for cam in sorted(self.detections) for d in self.detections[cam]]

    def digest(self) -> str:
        """SHA-256 over every emitted value, for determinism checks."""
        h = hashlib.sha256()
        for cam in sorted(self.detections):
            for d in self.detections[cam]:
                h.update(repr((d.time, d.camera, d.bbox.as_tuple(), d.confidence)).encode())
        h.update(self.sensor.time_ms.tobytes())
        h.update(self.sensor.accel.tobytes())
        h.update(np.nan_to_num(self.sensor.extra, nan=-1.0).tobytes())
        for key in ("injections", "removals_at_qa", "exits", "stop_intervals"):
            h.update(repr(getattr(self.ledger, key)).encode())
        h.update(repr(sorted(self.ledger.reference_passes.items())).encode())
        return h.hexdigest()


# ------------------------------------------------------------------- timing


class _Clock:
    """Wall time <-> running time under a stop schedule (seconds)."""

    def __init__(self, stops: Sequence[Tuple[float, float]]):
        self.starts = np.array([a for a, _ in stops], dtype=float)
        self.ends = np.array([b for _, b in stops], dtype=float)
        durations = self.ends - self.starts
        self.before = np.concatenate([[0.0], np.cumsum(durations)])  # downtime before stop i
        self.run_at_start = self.starts - self.before[:-1]

    def running(self, t):
        """Running time elapsed at wall time ``t`` (vectorised)."""
        t = np.asarray(t, dtype=float)
        i = np.searchsorted(self.starts, t, side="right")  # stops that began at or before t
        down = self.before[i].copy() if np.ndim(t) else self.before[i]
        if len(self.starts):
            j = np.clip(i - 1, 0, len(self.starts) - 1)
            inside = (i > 0) & (t < self.ends[j])
            # inside a stop: running time is frozen at the stop start
            down = np.where(inside, self.before[j] + (t - self.starts[j]), self.before[i])
        return t - down

    def wall(self, r):
        """Earliest wall time at which running time reaches ``r``."""
        r = np.asarray(r, dtype=float)
        k = np.searchsorted(self.run_at_start, r, side="left")  # stops strictly before r
        return r + self.before[k]


def _ms(t_s) -> np.ndarray:
    return np.array([ceil_ms(v * 1000.0) for v in np.atleast_1d(t_s)], dtype=np.int64)


# ---------------------------------------------------------------- simulation


def _stop_schedule(sc: Scenario, rng: np.random.Generator) -> List[Tuple[float, float]]:
    stops = [tuple(map(float, s)) for s in sc.stops]
    if sc.stochastic_stops is not None:
        mean_gap, mean_dur = sc.stochastic_stops
        t = 0.0
        extra = []
        while True:
            t += rng.exponential(mean_gap)
            d = rng.exponential(mean_dur)
            if t + d >= sc.duration_s:
                break
            extra.append((t, t + d))
            t += d
        for a, b in extra:
            if all(b <= x or a >= y for x, y in stops):
                stops.append((a, b))
        stops.sort()
    # stop bounds on the millisecond grid
    return [(ceil_ms(a * 1000) / 1000.0, ceil_ms(b * 1000) / 1000.0) for a, b in stops]


def _injection_running_times(sc: Scenario, clock: _Clock) -> np.ndarray:
    v = sc.belt_speed_mps
    end_wall = sc.duration_s if sc.injection_end_s is None else min(sc.duration_s, sc.injection_end_s)
    out = []
    r = 0.0
    in_cluster = 0
    while True:
        t = float(clock.wall(r))
        if t >= end_wall:
            break
        out.append(r)
        d = sc.dense
        if d is not None and d.start_s <= t < d.end_s:
            intra = (sc.box_length_m + d.cluster_gap_m) / v
            in_cluster += 1
            if in_cluster < d.cluster_size:
                r += intra
            else:
                in_cluster = 0
                r += max(d.cluster_period_s - (d.cluster_size - 1) * intra, intra)
        else:
            in_cluster = 0
            r += sc.injection_period_s
    return np.array(out, dtype=float)


def simulate(scenario: Scenario) -> SimOutput:
    """Run the scenario; identical scenario and seed give identical output."""
    sc = scenario
    rng = np.random.default_rng(sc.rng_seed)
    stops = _stop_schedule(sc, rng)
    check_intervals(stops, "stops")
    clock = _Clock(stops)
    v = sc.belt_speed_mps
    n1, n2, n3 = sc.node_positions_m

    r_inj = _injection_running_times(sc, clock)
    n = len(r_inj)
    defective = rng.random(n) < sc.defect_probability
    limit = np.where(defective, n2, n3)  # position where the piece leaves the belt
    dur = sc.duration_s
    dur_ms = sc.duration_ms

    def events_at(position, mask):
        idx = np.flatnonzero(mask)
        t = clock.wall(r_inj[idx] + (position - n1) / v)
        t_ms = _ms(t) if len(idx) else np.zeros(0, dtype=np.int64)
        keep = t_ms < dur_ms
        return [(int(a), int(b)) for a, b in zip(t_ms[keep], idx[keep])]

    inj_ms = _ms(clock.wall(r_inj)) if n else np.zeros(0, dtype=np.int64)
    injections = [(int(t), i) for i, t in enumerate(inj_ms) if t < dur_ms]
    removals = events_at(n2, defective)
    exits = events_at(n3, ~defective)
    passes = {}
    for e in sc.edges:
        passes[e.id] = events_at(e.reference_m, limit > e.reference_m)
    stop_ms = [(ceil_ms(a * 1000), ceil_ms(b * 1000)) for a, b in stops]

    sensor = _sensor(sc, stop_ms, rng)

    detections: Dict[int, List[Detection]] = {}
    frame_truth: Optional[List[FrameTruth]] = [] if sc.record_frame_truth else None
    with gc_paused():
        for cam in sorted(sc.cameras, key=lambda c: c.id):
            detections[cam.id] = _camera(sc, cam, clock, r_inj, limit, rng, frame_truth)
    if frame_truth is not None:
        frame_truth.sort(key=lambda f: (f.time, f.camera))

    ledger = GroundTruthLedger(
        injections=injections,
        removals_at_qa=removals,
        exits=exits,
        stop_intervals=stop_ms,
        per_frame_truth=frame_truth,
        reference_passes=passes,
        duration_ms=dur_ms,
    )
    return SimOutput(sc, detections, sensor, ledger, defective)


def _sensor(sc: Scenario, stop_ms, rng: np.random.Generator) -> SensorSeries:
    period = 1000.0 / sc.sensor_hz
    t = np.round(np.arange(0.0, sc.duration_ms, period)).astype(np.int64)
    stopped = np.zeros(len(t), dtype=bool)
    for a, b in stop_ms:
        stopped[(t >= a) & (t < b)] = True
    sigma = np.where(stopped, sc.sigma_stop, sc.sigma_run)
    mag = GRAVITY + rng.standard_normal(len(t)) * sigma
    accel = mag[:, None] * _MOUNT[None, :]
    gyro_sigma = np.where(stopped, 0.05, 1.5)[:, None]
    extra = np.empty((len(t), len(SENSOR_OPTIONAL)))
    extra[:, 0:3] = rng.standard_normal((len(t), 3)) * gyro_sigma
    extra[:, 3:6] = np.array([21.0, -4.5, 39.0]) + rng.standard_normal((len(t), 3)) * 0.2
    extra[:, 6] = 1013.2 + rng.standard_normal(len(t)) * 0.05
    extra[:, 7] = 24.0 + 1.5 * t / max(sc.duration_ms, 1)
    extra[:, 8] = 41.0 + rng.standard_normal(len(t)) * 0.2
    extra[:, 9] = 620.0 + 40.0 * t / max(sc.duration_ms, 1)
    return SensorSeries(t, accel, extra)


def _frame_times(sc: Scenario, cam: CameraLayout) -> np.ndarray:
    fps = cam.fps or sc.tick_hz
    end_ms = sc.duration_ms
    if cam.active_until_s is not None:
        end_ms = min(end_ms, int(round(cam.active_until_s * 1000)))
    n = int(math.ceil(end_ms * fps / 1000.0)) + 1
    t = np.round(np.arange(n) * (1000.0 / fps)).astype(np.int64)
    return np.unique(t[t < end_ms])


def _merge_boxes(frame_idx: np.ndarray, boxes: np.ndarray, frac: float):
    """Union adjacent boxes in a frame whose horizontal gap is below ``frac`` of a width."""
    if frac <= 0 or len(boxes) == 0:
        return frame_idx, boxes
    order = np.lexsort((boxes[:, 0], frame_idx))
    fi, bx = frame_idx[order], boxes[order]
    width = bx[:, 2] - bx[:, 0]
    gap = bx[1:, 0] - bx[:-1, 2]
    joined = (fi[1:] == fi[:-1]) & (gap < frac * np.minimum(width[1:], width[:-1]))
    group = np.concatenate([[0], np.cumsum(~joined)])
    n_groups = group[-1] + 1
    out = np.empty((n_groups, 4))
    out[:, 0] = np.full(n_groups, np.inf)
    out[:, 1] = np.full(n_groups, np.inf)
    out[:, 2] = np.full(n_groups, -np.inf)
    out[:, 3] = np.full(n_groups, -np.inf)
    np.minimum.at(out[:, 0], group, bx[:, 0])
    np.minimum.at(out[:, 1], group, bx[:, 1])
    np.maximum.at(out[:, 2], group, bx[:, 2])
    np.maximum.at(out[:, 3], group, bx[:, 3])
    gf = np.empty(n_groups, dtype=fi.dtype)
    gf[group] = fi
    return gf, out


def _camera(sc: Scenario, cam: CameraLayout, clock: _Clock, r_inj: np.ndarray, limit: np.ndarray,
            rng: np.random.Generator, frame_truth: Optional[List[FrameTruth]]) -> List[Detection]:
    v = sc.belt_speed_mps
    n1 = sc.node_positions_m[0]
    lo_s, hi_s = cam.fov_m
    times = _frame_times(sc, cam)
    r = clock.running(times / 1000.0)
    # pieces with position in [lo_s, hi_s] have injection running time in [r - hi/v, r - lo/v]
    a = np.searchsorted(r_inj, r - (hi_s - n1) / v - 1e-12, side="left")
    b = np.searchsorted(r_inj, r - (lo_s - n1) / v + 1e-12, side="right")
    counts = np.maximum(b - a, 0)
    frame_idx = np.repeat(np.arange(len(times)), counts)
    offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    piece = np.repeat(a, counts) + offsets
    s = n1 + v * (r[frame_idx] - r_inj[piece])
    keep = (s >= lo_s) & (s <= hi_s) & (s < limit[piece])
    frame_idx, piece, s = frame_idx[keep], piece[keep], s[keep]
    cx, cy = cam.project(s)
    w = sc.box_length_m * cam.px_per_m
    h = cam.box_height_px
    true_boxes = np.column_stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])

    if frame_truth is not None:
        starts = np.searchsorted(frame_idx, np.arange(len(times)), side="left")
        ends = np.searchsorted(frame_idx, np.arange(len(times)), side="right")
        for j, t in enumerate(times):
            sl = slice(starts[j], ends[j])
            frame_truth.append(
                FrameTruth(int(t), cam.id, tuple(BoundingBox(*row) for row in true_boxes[sl].tolist()),
                           tuple(int(p) for p in piece[sl]))
            )

    noise = sc.noise
    fidx, boxes = _merge_boxes(frame_idx, true_boxes, noise.merge_gap_fraction)
    if noise.miss_probability > 0:
        hit = rng.random(len(boxes)) >= noise.miss_probability
        fidx, boxes = fidx[hit], boxes[hit]
    if noise.bbox_jitter_px > 0:
        boxes = boxes + rng.standard_normal(boxes.shape) * noise.bbox_jitter_px
    conf = _confidences(noise, len(boxes), rng)
    if noise.false_positive_rate_per_frame > 0:
        n_fp = rng.poisson(noise.false_positive_rate_per_frame, size=len(times))
        k = int(n_fp.sum())
        fp_frame = np.repeat(np.arange(len(times)), n_fp)
        W, H = cam.image_size
        centers = rng.random((k, 2)) * np.array([W - w, H - h]) + np.array([w / 2, h / 2])
        fp_boxes = np.column_stack([centers[:, 0] - w / 2, centers[:, 1] - h / 2,
                                    centers[:, 0] + w / 2, centers[:, 1] + h / 2])
        fp_conf = _confidences(noise, k, rng)
        fidx = np.concatenate([fidx, fp_frame])
        boxes = np.concatenate([boxes, fp_boxes])
        conf = np.concatenate([conf, fp_conf])
    order = np.argsort(fidx, kind="stable")
    fidx, boxes, conf = fidx[order], boxes[order], conf[order]
    # jitter can in principle invert a box; keep geometry valid
    x0 = np.minimum(boxes[:, 0], boxes[:, 2] - 1.0)
    y0 = np.minimum(boxes[:, 1], boxes[:, 3] - 1.0)
    t_ms = times[fidx]
    if not (np.isfinite(boxes).all() and (x0 < boxes[:, 2]).all() and (y0 < boxes[:, 3]).all()
            and ((conf >= 0) & (conf <= 1)).all() and (t_ms >= 0).all()):
        raise ValidationError("simulator produced an invalid detection")
    det, box = Detection._unchecked, BoundingBox._unchecked
    return [
        det(t, cam.id, box(bx0, by0, bx1, by1), c)
        for t, bx0, by0, bx1, by1, c in zip(t_ms.tolist(), x0.tolist(), y0.tolist(),
                                            boxes[:, 2].tolist(), boxes[:, 3].tolist(), conf.tolist())
    ]


def _confidences(noise: NoiseModel, k: int, rng: np.random.Generator) -> np.ndarray:
    if noise.confidence_std > 0:
        return np.clip(noise.confidence_mean + rng.standard_normal(k) * noise.confidence_std, 0.0, 1.0)
    return np.full(k, noise.confidence_mean)


# ------------------------------------------------------------- truth & canned


def true_kpis(ledger: GroundTruthLedger, scenario: Scenario) -> KpiSeries:
    """KPIs from the ledger through the same code path the engine uses."""
    return ledger_kpis(ledger, scenario.ideal_cycle_time_s, scenario.edges[0].id)


def default_edges() -> Tuple[EdgeLayout, ...]:
    return (EdgeLayout(1, 1, 2, reference_m=1.0, gap_m=0.5), EdgeLayout(2, 2, 3, reference_m=3.0, gap_m=0.5))


def default_cameras(fallback: bool = True) -> Tuple[CameraLayout, ...]:
    """Camera 1 watches edge 1, camera 4 edge 2, camera 3 both as fallback."""
    cams = [
        CameraLayout(1, x0_px=-80.0, px_per_m=400.0, y0_px=400.0, fov_m=(0.75, 1.65), edges=((1, 1),),
                     image_size=(1620, 1080)),
        CameraLayout(4, x0_px=-960.0, px_per_m=400.0, y0_px=500.0, fov_m=(2.75, 3.65), edges=((2, 1),),
                     image_size=(1920, 1080)),
    ]
    if fallback:
        cams.append(
            CameraLayout(3, x0_px=40.0, px_per_m=300.0, y0_px=360.0, fov_m=(0.5, 3.9),
                         edges=((1, 2), (2, 2)), box_height_px=24.0, image_size=(1280, 720))
        )
    return tuple(sorted(cams, key=lambda c: c.id))


def base_scenario(**overrides) -> Scenario:
    kw = dict(edges=default_edges(), cameras=default_cameras())
    kw.update(overrides)
    return Scenario(**kw)


def nominal_noise() -> NoiseModel:
    return NoiseModel(miss_probability=0.02, bbox_jitter_px=2.0, false_positive_rate_per_frame=0.01,
                      confidence_mean=0.85, confidence_std=0.05)


def dense_packing_scenario(seed: int = 0) -> Scenario:
    """Ten minutes with tightly clustered pieces in minutes 4 to 6.

    Boxes within a cluster are separated by less than a tenth of a box width,
    which the detector model merges into one box, so the engine undercounts
    while the piece rate is far above the ideal cycle time.
    """
    return base_scenario(
        duration_s=600.0,
        defect_probability=0.0,
        stops=((100.0, 130.0),),
        dense=DenseWindow(240.0, 420.0, cluster_size=2, cluster_gap_m=0.002, cluster_period_s=0.7),
        noise=NoiseModel(merge_gap_fraction=0.1),
        rng_seed=seed,
    )


# ------------------------------------------------------------------ file io


def scenario_to_dict(sc: Scenario) -> dict:
    doc = asdict(sc)
    doc = {k: v for k, v in doc.items() if v is not None}
    doc["stops"] = [list(s) for s in sc.stops]
    doc["node_positions_m"] = list(sc.node_positions_m)
    if sc.stochastic_stops is not None:
        doc["stochastic_stops"] = {"mean_interval_s": sc.stochastic_stops[0],
                                   "mean_duration_s": sc.stochastic_stops[1]}
    doc["edges"] = [asdict(e) for e in sc.edges]
    cams = []
    for c in sc.cameras:
        d = {k: v for k, v in asdict(c).items() if v is not None}
        d["fov_m"] = list(c.fov_m)
        d["image_size"] = list(c.image_size)
        d["edges"] = [{"edge": e, "priority": p} for e, p in c.edges]
        cams.append(d)
    doc["cameras"] = cams
    return doc


def scenario_from_dict(doc: dict) -> Scenario:
    try:
        doc = dict(doc)
        noise = NoiseModel(**doc.pop("noise", {}))
        edges = tuple(EdgeLayout(**e) for e in doc.pop("edges", []))
        cams = []
        for c in doc.pop("cameras", []):
            c = dict(c)
            c["fov_m"] = tuple(c["fov_m"])
            if "image_size" in c:
                c["image_size"] = tuple(c["image_size"])
            c["edges"] = tuple((int(e["edge"]), int(e["priority"])) for e in c.get("edges", []))
            cams.append(CameraLayout(**c))
        dense = doc.pop("dense", None)
        stoch = doc.pop("stochastic_stops", None)
        if stoch is not None:
            stoch = (float(stoch["mean_interval_s"]), float(stoch["mean_duration_s"]))
        doc["stops"] = tuple(tuple(map(float, s)) for s in doc.get("stops", []))
        if "node_positions_m" in doc:
            doc["node_positions_m"] = tuple(doc["node_positions_m"])
        return Scenario(
            noise=noise,
            edges=edges or default_edges(),
            cameras=tuple(cams) or default_cameras(),
            dense=DenseWindow(**dense) if dense else None,
            stochastic_stops=stoch,
            **doc,
        )
    except (TypeError, KeyError) as exc:
        raise ValidationError(f"scenario: {exc}") from None


def load_scenario(path) -> Scenario:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"scenario: {exc}") from None
    return scenario_from_dict(doc)


def dump_scenario(path, sc: Scenario) -> None:
    Path(path).write_text(tomli_w.dumps(scenario_to_dict(sc)), encoding="utf-8")


def write_outputs(out: SimOutput, out_dir) -> Dict[str, Path]:
    """Write detections/, sensor.csv, ledger.json and topology.toml."""
    out_dir = Path(out_dir)
    det_dir = out_dir / "detections"
    det_dir.mkdir(parents=True, exist_ok=True)
    for old in det_dir.glob("*.jsonl"):
        old.unlink()
    for cam, dets in sorted(out.detections.items()):
        write_detections(det_dir / f"cam{cam}.jsonl", dets)
    paths = {
        "detections": det_dir,
        "sensor": out_dir / "sensor.csv",
        "ledger": out_dir / "ledger.json",
        "topology": out_dir / "topology.toml",
    }
    write_sensor_csv(paths["sensor"], out.sensor)
    dump_ledger(paths["ledger"], out.ledger)
    dump_topology(paths["topology"], out.topology)
    return paths


def ledger_summary(ledger: GroundTruthLedger) -> str:
    down = sum(b - a for a, b in ledger.stop_intervals) / 1000.0
    return (
        f"duration {ledger.duration_ms / 60000.0:.1f} min, injected {len(ledger.injections)}, "
        f"removed {len(ledger.removals_at_qa)}, exited {len(ledger.exits)}, "
        f"stops {len(ledger.stop_intervals)} ({down:.1f} s)"
    )
