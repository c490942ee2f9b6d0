import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import dense_crossings, refractory

from twinline.availability import RunStopSignal
from twinline.core import BoundingBox, LineSegment2D
from twinline.counting import (
    CrossingEvent,
    EdgeCountSeries,
    detect_crossings,
    estimate_speed,
    first_flow_crossings,
    fuse_edge_counts,
    session_minutes,
    throughput,
    trajectory_crossings,
)
from twinline.ingest import Edge, Tripwire
from twinline.pipeline import replay
from twinline.simulator import base_scenario, simulate
from twinline.tracking import TrackSnapshot

WIRE = LineSegment2D((100.0, 60.0), (100.0, 0.0))  # flow in +x crosses it left to right


def _snaps(xs, times=None, tid=1, cam=1, y=30.0):
    times = times or [33 * k for k in range(len(xs))]
    return [TrackSnapshot(t, cam, tid, BoundingBox(x - 5, y - 5, x + 5, y + 5), 0.9) for t, x in zip(times, xs)]


def _edge(*cams, gap=0.5, second_wire=True):
    tws = tuple(
        Tripwire(cam, WIRE, prio, LineSegment2D((150.0, 60.0), (150.0, 0.0)) if second_wire else None,
                 gap if second_wire else 0.0)
        for prio, cam in enumerate(cams, start=1)
    )
    return Edge(1, 1, 2, tws)


# ---------------------------------------------------------------- crossings

def test_straight_pass_one_event():
    ev = detect_crossings(_snaps([80, 90, 95, 105, 110]), _edge(1, second_wire=False).tripwires[0], 1)
    assert [(e.direction, e.time) for e in ev] == [(1, 83)]  # 66 + 0.5 * 33 rounded up


def test_jitter_within_refractory_debounced():
    xs = [90, 98, 102, 99, 101, 98, 103, 110]
    times = [0, 200, 400, 600, 800, 1000, 1200, 1400]
    ev = trajectory_crossings(times, [(x, 30.0) for x in xs], WIRE)
    assert [s for _, s in ev] == [1, -1]
    want = refractory(dense_crossings(times, [(x, 30.0) for x in xs], WIRE.a, WIRE.b), 2000)
    assert ev == want


def test_parallel_path_no_events():
    ev = trajectory_crossings([0, 100, 200], [(90, 80), (100, 80), (110, 80)], WIRE)
    assert ev == []


def test_counter_flow_recorded():
    ev = detect_crossings(_snaps([110, 100.5, 95]), _edge(1).tripwires[0], 1)
    assert [e.direction for e in ev] == [-1]


def test_sample_exactly_on_wire():
    ev = trajectory_crossings([0, 33, 66], [(95, 30), (100, 30), (105, 30)], WIRE)
    assert ev == [(33, 1)]
    # touching and going back is not a crossing
    assert trajectory_crossings([0, 33, 66], [(95, 30), (100, 30), (95, 30)], WIRE) == []


def test_second_wire_indexed():
    ev = detect_crossings(_snaps([90, 120, 160]), _edge(1).tripwires[0], 1)
    assert [(e.wire_index, e.direction) for e in ev] == [(0, 1), (1, 1)]


def test_tracks_kept_apart():
    snaps = _snaps([90, 95, 105], tid=1) + _snaps([105, 95, 90], tid=2)
    snaps.sort(key=lambda s: s.time)
    ev = detect_crossings(snaps, _edge(1, second_wire=False).tripwires[0], 1)
    assert sorted((e.track_id, e.direction) for e in ev) == [(1, 1), (2, -1)]


def test_other_camera_ignored():
    assert detect_crossings(_snaps([90, 110], cam=2), _edge(1).tripwires[0], 1) == []


def _random_trajectory(r):
    n = r.randint(2, 25)
    times = sorted(r.sample(range(0, 6000), n))
    if r.random() < 0.5:
        pts = [(float(r.randint(95, 105)), float(r.randint(-5, 65))) for _ in range(n)]
    else:
        pts = [(r.uniform(80, 120), r.uniform(-10, 70)) for _ in range(n)]
    return times, pts


@pytest.mark.parametrize("seed", range(5))
def test_matches_dense_oracle(seed):
    r = random.Random(seed)
    for _ in range(60):
        times, pts = _random_trajectory(r)
        assert trajectory_crossings(times, pts, WIRE, 2000) == refractory(
            dense_crossings(times, pts, WIRE.a, WIRE.b), 2000)


@given(st.lists(st.tuples(st.integers(1, 400), st.floats(60, 140), st.floats(-20, 80)), min_size=2, max_size=40),
       st.integers(0, 3000))
def test_refractory_soundness(steps, window):
    t, times, pts = 0, [], []
    for dt, x, y in steps:
        t += dt
        times.append(t)
        pts.append((x, y))
    ev = trajectory_crossings(times, pts, WIRE, window)
    for sign in (1, -1):
        ts = [t for t, s in ev if s == sign]
        assert all(b - a >= window for a, b in zip(ts, ts[1:]))


def test_first_flow_crossing_per_track():
    evs = [CrossingEvent(100, 1, 1, 7, 1), CrossingEvent(2500, 1, 1, 7, -1), CrossingEvent(4800, 1, 1, 7, 1),
           CrossingEvent(200, 1, 1, 8, 1), CrossingEvent(300, 2, 1, 9, 1)]
    assert [(e.track_id, e.time) for e in first_flow_crossings(evs, 1)] == [(7, 100), (8, 200)]


# ---------------------------------------------------------------- fusion

def _flow(cam, times):
    return [CrossingEvent(t, 1, cam, i, 1) for i, t in enumerate(times)]


def test_priority_camera_used_verbatim():
    edge = _edge(1, 3)
    ev = {1: _flow(1, [1000, 2000, 70000]), 3: _flow(3, [1500])}
    det = {1: np.arange(0, 120000, 33), 3: np.arange(0, 120000, 33)}
    s = fuse_edge_counts(ev, edge, None, det, 120000)
    assert s.counts == [2, 1] and s.active_camera == [1, 1]
    assert s.cumulative == [2, 3]


def test_failover_after_priority_camera_dies():
    edge = _edge(1, 3)
    dur = 55 * 60000
    ev = {1: _flow(1, range(500, 52 * 60000 + 40000, 1100)), 3: _flow(3, range(600, dur, 1100))}
    det = {1: np.arange(0, 52 * 60000 + 40000, 33), 3: np.arange(0, dur, 33)}
    s = fuse_edge_counts(ev, edge, None, det, dur)
    assert s.active_camera[:53] == [1] * 53
    assert s.active_camera[53:] == [3, 3]
    assert s.data_gaps == []


def test_all_cameras_dead_gives_data_gaps():
    edge = _edge(1)
    s = fuse_edge_counts({1: _flow(1, [1000])}, edge, None, {1: np.array([0, 500, 1000])}, 180000)
    assert s.counts == [1, None, None]
    assert s.cumulative == [1, 1, 1]
    assert s.data_gaps == [1, 2]


def test_stopped_minute_is_not_a_gap():
    edge = _edge(1)
    sig = RunStopSignal.from_stop_intervals([(60000, 120000)], 0, 180000)
    det = {1: np.concatenate([np.arange(0, 60000, 33), np.arange(120000, 180000, 33)])}
    s = fuse_edge_counts({1: []}, edge, sig, det, 180000)
    assert s.counts == [0, 0, 0] and s.data_gaps == []


def test_partial_final_minute():
    assert session_minutes(150000) == [60000, 60000, 30000]
    s = EdgeCountSeries.from_times(1, [10, 61000, 130000], 150000)
    assert s.partial_final_minute
    assert throughput(s) == [1.0, 1.0, 2.0]


# ---------------------------------------------------------------- speed, throughput

def test_speed_arithmetic():
    evs = [CrossingEvent(1000, 1, 1, 1, 1, 0), CrossingEvent(3000, 1, 1, 1, 1, 1)]
    sp = estimate_speed(evs, _edge(1, gap=0.5), 60000)
    assert sp.median_mps == [pytest.approx(0.25)] and sp.samples == [1]


def test_speed_needs_both_wires():
    evs = [CrossingEvent(1000, 1, 1, 1, 1, 0)]
    assert estimate_speed(evs, _edge(1), 60000).median_mps == [None]
    sp = estimate_speed(evs, _edge(1, second_wire=False), 60000)
    assert sp.reason == "edge has no second wire"


def test_speed_median_rejects_outlier():
    evs = []
    for k, v in enumerate([0.25, 0.25, 0.26, 0.24, 0.60]):
        t0 = 1000 + k * 5000
        evs += [CrossingEvent(t0, 1, 1, k, 1, 0), CrossingEvent(t0 + round(500 / v), 1, 1, k, 1, 1)]
    sp = estimate_speed(evs, _edge(1, gap=0.5), 60000)
    assert sp.median_mps[0] == pytest.approx(0.25, abs=1e-3)
    assert sp.samples == [5]


def test_throughput_examples():
    s = EdgeCountSeries(1, [3, 3, 3], [1, 1, 1], [60000] * 3)
    assert throughput(s) == [3, 3, 3]
    g = EdgeCountSeries(1, [3, None, 3], [1, None, 1], [60000] * 3)
    assert throughput(g) == [3, None, 3]
    assert throughput(g, window=3) == [3, 3, 3]


def test_throughput_at_ideal_rate():
    out = simulate(base_scenario(duration_s=600, stops=()))
    rep = replay(out.all_detections(), out.scenario.topology(), sensor=out.sensor)
    rate = rep.edges[1]["throughput"]
    assert all(v in (54, 55) for v in rate[1:])
    assert np.mean(rate[1:]) == pytest.approx(60 / 1.1, abs=0.6)


# ---------------------------------------------------------------- conservation

def test_conservation_noiseless_drained_line():
    sc = base_scenario(duration_s=420, injection_end_s=300, defect_probability=0.1, stops=((100, 130),), rng_seed=3)
    out = simulate(sc)
    rep = replay(out.all_detections(), sc.topology(), sensor=out.sensor)
    e1, e2 = rep.edges[1]["cumulative"][-1], rep.edges[2]["cumulative"][-1]
    assert e1 - len(out.ledger.removals_at_qa) == e2
    for col in rep.edges.values():
        assert col["cumulative"] == sorted(col["cumulative"])
