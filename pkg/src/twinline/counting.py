"""Tripwire crossings, per-edge count fusion across cameras, belt speed."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .core import (
    MS_PER_MINUTE,
    LineSegment2D,
    Point,
    Timestamp,
    ceil_ms,
)
from .ingest import Edge, Tripwire

DEFAULT_REFRACTORY_MS = 2000


@dataclass(frozen=True)
class CrossingEvent:
    time: Timestamp
    edge_id: int
    camera: int
    track_id: int
    direction: int
    wire_index: int = 0


def session_minutes(duration_ms: int) -> List[int]:
    """Duration in ms of each minute bin, aligned to session start."""
    if duration_ms <= 0:
        return []
    n = -(-duration_ms // MS_PER_MINUTE)
    return [MS_PER_MINUTE] * (n - 1) + [duration_ms - MS_PER_MINUTE * (n - 1)]


# ------------------------------------------------------------------ crossings


def _crossing_candidates(track, times, x, y, wire: LineSegment2D):
    """Wire crossings of every trajectory, before the refractory filter.

    Inputs are flat arrays sorted by ``(track, time)``. Returns parallel lists
    ``(track, time, direction)``. A sample lying exactly on the wire's line
    keeps the side of the sample before it; when the side then flips, the
    crossing time is that of the first on-line sample.
    """
    (ax, ay), (bx, by) = wire.a, wire.b
    ex, ey = bx - ax, by - ay
    d = ex * (y - ay) - ey * (x - ax)  # same expression as the scalar cross product
    nz = np.flatnonzero(d != 0.0)
    if len(nz) < 2:
        return [], [], []
    i, j = nz[:-1], nz[1:]
    flip = (track[i] == track[j]) & ((d[i] > 0) != (d[j] > 0))
    i, j = i[flip], j[flip]
    if len(i) == 0:
        return [], [], []
    adjacent = j == i + 1
    # adjacent samples: proper segment intersection with the wire's extent
    x1, y1, x2, y2 = x[i], y[i], x[j], y[j]
    d3 = (x2 - x1) * (ay - y1) - (y2 - y1) * (ax - x1)
    d4 = (x2 - x1) * (by - y1) - (y2 - y1) * (bx - x1)
    d1, d2 = d[i], d[j]
    u = d1 / (d1 - d2)
    t_adj = times[i] + u * (times[j] - times[i])
    ok_adj = d3 * d4 < 0.0
    # on-line samples in between: the first one must lie strictly inside the wire
    z = np.minimum(i + 1, len(x) - 1)
    lam = ((x[z] - ax) * ex + (y[z] - ay) * ey) / (ex * ex + ey * ey)
    ok_on = (lam > 0.0) & (lam < 1.0)
    ok = np.where(adjacent, ok_adj, ok_on)
    t = np.where(adjacent, t_adj, times[z])
    sign = np.where(d2 > 0.0, 1, -1)
    return track[i][ok].tolist(), t[ok].tolist(), sign[ok].tolist()


def _apply_refractory(tracks, times, signs, refractory_ms: int):
    out = []
    last: Dict[Tuple[int, int], Timestamp] = {}
    for tid, tf, sign in zip(tracks, times, signs):
        t = ceil_ms(tf)
        prev = last.get((tid, sign))
        if prev is not None and t - prev < refractory_ms:
            continue
        last[(tid, sign)] = t
        out.append((tid, t, sign))
    return out


def trajectory_crossings(
    times: Sequence[Timestamp],
    points: Sequence[Point],
    wire: LineSegment2D,
    refractory_ms: int = DEFAULT_REFRACTORY_MS,
) -> List[Tuple[Timestamp, int]]:
    """Crossings of one trajectory, as ``(time, direction)`` pairs.

    The crossing time is linearly interpolated between the two samples and
    rounded up to the next millisecond. A crossing is dropped when the last
    kept crossing with the same direction is less than ``refractory_ms`` old.
    """
    if len(points) < 2:
        return []
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    tr, tf, sg = _crossing_candidates(np.zeros(len(pts), dtype=np.int64), np.asarray(times, dtype=float),
                                      pts[:, 0], pts[:, 1], wire)
    return [(t, s) for _, t, s in _apply_refractory(tr, tf, sg, refractory_ms)]


def detect_crossings(
    snapshots: Iterable,
    tripwire: Tripwire,
    edge_id: int,
    refractory_ms: int = DEFAULT_REFRACTORY_MS,
) -> List[CrossingEvent]:
    """Crossing events of every track against the tripwire's wire(s).

    ``snapshots`` are one camera's track snapshots in time order. Counter-flow
    events (direction -1) are returned too; counting ignores them.
    """
    rows = [(s.track_id, s.time, s.bbox.x_min, s.bbox.y_min, s.bbox.x_max, s.bbox.y_max)
            for s in snapshots if s.camera == tripwire.camera]
    if not rows:
        return []
    a = np.array(rows, dtype=float)
    order = np.lexsort((a[:, 1], a[:, 0]))
    a = a[order]
    track = a[:, 0].astype(np.int64)
    x = (a[:, 2] + a[:, 4]) / 2.0
    y = (a[:, 3] + a[:, 5]) / 2.0
    events: List[CrossingEvent] = []
    for wi, wire in enumerate(tripwire.wires):
        tr, tf, sg = _crossing_candidates(track, a[:, 1], x, y, wire)
        for tid, t, sign in _apply_refractory(tr, tf, sg, refractory_ms):
            events.append(CrossingEvent(t, edge_id, tripwire.camera, int(tid), int(sign), wi))
    events.sort(key=lambda e: (e.time, e.camera, e.track_id, e.wire_index))
    return events


# -------------------------------------------------------------------- fusion


@dataclass
class EdgeCountSeries:
    """Per-minute flow-direction counts for one edge.

    ``counts[m]`` is None for a data-gap minute (line running, no live
    camera); ``cumulative`` carries the running total forward over gaps.
    """

    edge_id: int
    counts: List[Optional[int]]
    active_camera: List[Optional[int]]
    minute_ms: List[int]
    events: List[CrossingEvent] = field(default_factory=list)

    @property
    def cumulative(self) -> List[int]:
        out, total = [], 0
        for c in self.counts:
            total += c or 0
            out.append(total)
        return out

    @property
    def data_gaps(self) -> List[int]:
        return [m for m, c in enumerate(self.counts) if c is None]

    @property
    def partial_final_minute(self) -> bool:
        return bool(self.minute_ms) and self.minute_ms[-1] < MS_PER_MINUTE

    def total(self) -> int:
        return sum(c or 0 for c in self.counts)

    @classmethod
    def from_times(cls, edge_id: int, times: Iterable[Timestamp], duration_ms: int) -> "EdgeCountSeries":
        """Series from raw pass times (ledger truth or a single camera)."""
        minutes = session_minutes(duration_ms)
        counts = [0] * len(minutes)
        for t in times:
            m = t // MS_PER_MINUTE
            if 0 <= m < len(counts):
                counts[m] += 1
        return cls(edge_id, counts, [None] * len(minutes), minutes)


def _running_windows(signal, lo: int, hi: int) -> List[Tuple[int, int]]:
    if signal is None:
        return [(lo, hi)]
    return signal.intervals_within(1, lo, hi)


def first_flow_crossings(events: Iterable[CrossingEvent], edge_id: int, wire_index: int = 0) -> List[CrossingEvent]:
    """The earliest flow-direction crossing of each track, in time order.

    A piece passes a reference point once. Later flow events of the same
    track come from a box jittering across the wire while the line is
    stopped, which the refractory window alone lets through every window.
    """
    first: Dict[Tuple[int, int], CrossingEvent] = {}
    for e in sorted(events, key=lambda e: e.time):
        if e.edge_id == edge_id and e.direction == 1 and e.wire_index == wire_index:
            first.setdefault((e.camera, e.track_id), e)
    return sorted(first.values(), key=lambda e: e.time)


def fuse_edge_counts(
    events_by_camera: Mapping[int, Sequence[CrossingEvent]],
    edge: Edge,
    availability,
    detection_times: Mapping[int, np.ndarray],
    duration_ms: int,
) -> EdgeCountSeries:
    """Per minute, count the first flow crossings of the best live camera.

    A camera is live in a minute if it produced at least one detection during
    the running part of that minute, or if the line was stopped all minute.
    ``availability`` is a run/stop signal (or None to treat the line as always
    running); ``detection_times`` holds sorted detection times per camera.
    """
    minutes = session_minutes(duration_ms)
    counts: List[Optional[int]] = []
    active: List[Optional[int]] = []
    chosen: List[CrossingEvent] = []
    flow = {cam: first_flow_crossings(evs, edge.edge_id) for cam, evs in events_by_camera.items()}
    flow_times = {cam: np.array([e.time for e in evs], dtype=np.int64) for cam, evs in flow.items()}
    all_events = {
        cam: sorted((e for e in evs if e.edge_id == edge.edge_id), key=lambda e: e.time)
        for cam, evs in events_by_camera.items()
    }
    all_times = {cam: np.array([e.time for e in evs], dtype=np.int64) for cam, evs in all_events.items()}
    for m, dur in enumerate(minutes):
        lo, hi = m * MS_PER_MINUTE, m * MS_PER_MINUTE + dur
        windows = _running_windows(availability, lo, hi)
        fully_stopped = not windows
        pick = None
        for tw in edge.by_priority():
            if fully_stopped:
                pick = tw.camera
                break
            times = detection_times.get(tw.camera)
            if times is None or len(times) == 0:
                continue
            if any(np.searchsorted(times, b) > np.searchsorted(times, a) for a, b in windows):
                pick = tw.camera
                break
        active.append(pick)
        if pick is None:
            counts.append(None)
            continue
        ft = flow_times.get(pick, np.zeros(0, dtype=np.int64))
        counts.append(int(np.searchsorted(ft, hi) - np.searchsorted(ft, lo)))
        at = all_times.get(pick, np.zeros(0, dtype=np.int64))
        chosen.extend(all_events.get(pick, [])[np.searchsorted(at, lo):np.searchsorted(at, hi)])
    return EdgeCountSeries(edge.edge_id, counts, active, minutes, chosen)


# --------------------------------------------------------------------- speed


@dataclass
class SpeedEstimate:
    """Per-minute median belt speed in m/s (None when no transit ended that minute)."""

    edge_id: int
    median_mps: List[Optional[float]]
    samples: List[int]
    reason: Optional[str] = None


def transit_speeds(events: Sequence[CrossingEvent], edge: Edge) -> List[Tuple[Timestamp, float]]:
    """``(time_at_wire_b, speed)`` for every track crossing wire A then wire B."""
    gaps = {tw.camera: tw.gap_m for tw in edge.tripwires if tw.wire_b is not None}
    started: Dict[Tuple[int, int], Timestamp] = {}
    out: List[Tuple[Timestamp, float]] = []
    for e in sorted(events, key=lambda e: (e.time, e.wire_index)):
        if e.direction != 1 or e.camera not in gaps:
            continue
        key = (e.camera, e.track_id)
        if e.wire_index == 0:
            started[key] = e.time
        elif e.wire_index == 1 and key in started:
            dt = e.time - started.pop(key)
            if dt > 0:
                out.append((e.time, gaps[e.camera] / (dt / 1000.0)))
    return out


def estimate_speed(events: Sequence[CrossingEvent], edge: Edge, duration_ms: int) -> SpeedEstimate:
    minutes = session_minutes(duration_ms)
    if not any(tw.wire_b is not None for tw in edge.tripwires):
        return SpeedEstimate(edge.edge_id, [None] * len(minutes), [0] * len(minutes),
                             reason="edge has no second wire")
    per_min: List[List[float]] = [[] for _ in minutes]
    for t, v in transit_speeds(events, edge):
        m = t // MS_PER_MINUTE
        if 0 <= m < len(per_min):
            per_min[m].append(v)
    return SpeedEstimate(
        edge.edge_id,
        [statistics.median(v) if v else None for v in per_min],
        [len(v) for v in per_min],
    )


def throughput(series: EdgeCountSeries, window: int = 1) -> List[Optional[float]]:
    """Pieces per minute; partial minutes are rescaled to a full minute.

    ``window > 1`` applies the centred rolling mean. Data-gap minutes are None.
    """
    from .kpi import rolling_mean

    if window < 1:
        raise ValueError("window must be >= 1")
    rate = [
        None if c is None else c * MS_PER_MINUTE / dur
        for c, dur in zip(series.counts, series.minute_ms)
    ]
    return rate if window == 1 else rolling_mean(rate, window)
