from collections import defaultdict
from pathlib import Path

import numpy as np
import pytest
from oracles import hand_exit_count

import twinline
from twinline._validation import ValidationError
from twinline.ingest import load_ledger, load_topology, read_detection_inputs, read_sensor_csv
from twinline.pipeline import replay
from twinline.simulator import (
    DenseWindow,
    NoiseModel,
    base_scenario,
    default_cameras,
    dense_packing_scenario,
    dump_scenario,
    ledger_summary,
    load_scenario,
    nominal_noise,
    simulate,
    write_outputs,
)

DATA = Path(twinline.__file__).parent / "data"


def test_same_seed_same_output():
    sc = base_scenario(duration_s=120, noise=nominal_noise(), stochastic_stops=(30, 5), rng_seed=7)
    assert simulate(sc).digest() == simulate(sc).digest()
    assert simulate(sc.with_seed(8)).digest() != simulate(sc).digest()


def test_exit_count_matches_hand_computation():
    sc = base_scenario(duration_s=61, stops=(), defect_probability=0.0)
    out = simulate(sc)
    assert sc.transit_time_s == 16.0
    assert len(out.ledger.exits) == hand_exit_count(61, 16, 1.1) == 41
    assert len(out.ledger.injections) == hand_exit_count(61, 0, 1.1)


def test_noiseless_detections_are_the_true_boxes():
    out = simulate(base_scenario(duration_s=30, record_frame_truth=True))
    by_frame = defaultdict(list)
    for d in out.all_detections():
        by_frame[(d.camera, d.time)].append(d.bbox.as_tuple())
    truth = {(f.camera, f.time): [b.as_tuple() for b in f.boxes] for f in out.ledger.per_frame_truth}
    assert sum(len(v) for v in truth.values()) > 0
    for key, boxes in truth.items():
        assert sorted(by_frame.get(key, [])) == pytest.approx(sorted(boxes))
    assert all(key in truth for key in by_frame)


@pytest.mark.parametrize("seed", range(3))
def test_piece_conservation(seed):
    sc = base_scenario(duration_s=300, defect_probability=0.1, stochastic_stops=(60, 10), rng_seed=seed)
    led = simulate(sc).ledger
    done = {i for _, i in led.exits} | {i for _, i in led.removals_at_qa}
    injected = {i for _, i in led.injections}
    assert done <= injected
    assert not ({i for _, i in led.exits} & {i for _, i in led.removals_at_qa})
    in_transit = injected - done
    assert len(injected) == len(led.exits) + len(led.removals_at_qa) + len(in_transit)
    # only pieces injected within one transit of the end can still be on the belt
    last = {i: t for t, i in led.injections}
    assert all(last[i] > sc.duration_ms - (sc.transit_time_s * 1000 + 200_000) for i in in_transit)


def test_ledger_stops_follow_schedule():
    stops = ((10.0, 20.5), (40.25, 41.0))
    led = simulate(base_scenario(duration_s=60, stops=stops)).ledger
    assert led.stop_intervals == [(10000, 20500), (40250, 41000)]


def test_no_motion_during_stops():
    led = simulate(base_scenario(duration_s=120, stops=((30, 60),), defect_probability=0.2)).ledger
    for events in (led.exits, led.removals_at_qa, *led.reference_passes.values()):
        assert not any(30000 < t < 60000 for t, _ in events)


def test_sensor_quiet_while_stopped():
    out = simulate(base_scenario(duration_s=60, stops=((20, 40),)))
    s = out.sensor
    mag = np.linalg.norm(s.accel, axis=1)
    stopped = (s.time_ms >= 20000) & (s.time_ms < 40000)
    assert mag[stopped].std() < 0.05 < mag[~stopped].std()


def test_invalid_scenarios_rejected():
    with pytest.raises(ValidationError, match="stops"):
        base_scenario(stops=((10, 30), (20, 40)))
    with pytest.raises(ValidationError, match="stops"):
        base_scenario(duration_s=60, stops=((50, 70),))
    with pytest.raises(ValidationError, match="defect_probability"):
        base_scenario(defect_probability=1.5)
    with pytest.raises(ValidationError, match="cameras"):
        base_scenario(cameras=default_cameras()[:1] * 2)
    with pytest.raises(ValidationError):
        NoiseModel(miss_probability=-0.1)


def test_scenario_round_trip(tmp_path):
    sc = base_scenario(duration_s=90, stops=((5, 10),), stochastic_stops=(40, 3), noise=nominal_noise(),
                       dense=DenseWindow(20, 40), rng_seed=5)
    dump_scenario(tmp_path / "s.toml", sc)
    assert load_scenario(tmp_path / "s.toml") == sc


def test_bundled_scenario_loads():
    sc = load_scenario(DATA / "paper_like.scenario")
    assert sc.duration_s == 4200 and sc.ideal_cycle_time_s == 1.1
    assert sum(b - a for a, b in sc.stops) == 390
    assert {c.id for c in sc.cameras} == {1, 2, 3, 4}


def test_bad_scenario_file(tmp_path):
    p = tmp_path / "bad.toml"
    p.write_text("duration_s = [", encoding="utf-8")
    with pytest.raises(ValidationError):
        load_scenario(p)
    p.write_text("no_such_field = 1\n", encoding="utf-8")
    with pytest.raises(ValidationError):
        load_scenario(p)


def test_written_outputs_read_back(tmp_path):
    out = simulate(base_scenario(duration_s=60, noise=nominal_noise(), stops=((20, 25),), rng_seed=1))
    paths = write_outputs(out, tmp_path)
    dets = read_detection_inputs([paths["detections"]])
    assert dets.warnings == 0
    def key(d):
        return (d.camera, d.time, d.bbox.as_tuple(), d.confidence)

    assert sorted(map(key, dets)) == sorted(map(key, out.all_detections()))
    sensor = read_sensor_csv(paths["sensor"])
    np.testing.assert_array_equal(sensor.time_ms, out.sensor.time_ms)
    np.testing.assert_allclose(sensor.accel, out.sensor.accel, rtol=1e-9)
    assert load_ledger(paths["ledger"]) == out.ledger
    assert load_topology(paths["topology"]) == out.topology


def test_summary_line():
    out = simulate(base_scenario(duration_s=120, stops=((10, 20),)))
    assert ledger_summary(out.ledger).startswith("duration 2.0 min, injected ")
    assert "stops 1 (10.0 s)" in ledger_summary(out.ledger)


def test_dense_window_undercounts_above_ideal_rate():
    sc = dense_packing_scenario(seed=0)
    out = simulate(sc)
    rep = replay(out.all_detections(), sc.topology(), sensor=out.sensor)
    truth = [t for t, _ in out.ledger.reference_passes[1]]
    dense_truth = sum(240000 <= t < 420000 for t in truth)
    dense_pred = sum(rep.edges[1]["counts"][4:7])
    assert dense_pred < dense_truth
    assert any(rep.minutes[m]["performance"] > 1.0 for m in range(4, 7))
    assert rep.flags["performance_anomaly"]
