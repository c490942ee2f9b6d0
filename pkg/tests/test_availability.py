import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import square_wave_sensor
from sklearn.base import clone

from twinline._validation import CalibrationError, ValidationError
from twinline.availability import (
    RUNNING,
    STOPPED,
    AvailabilityConfig,
    DowntimeEvent,
    RunStopClassifier,
    RunStopSignal,
    auto_thresholds,
    classify_run_stop,
    debounce,
    downtime_events,
    hysteresis,
    otsu_threshold,
    total_downtime,
    total_downtime_ms,
    vibration_feature,
    windowed_std,
)
from twinline.ingest import SensorSample, SensorSeries
from twinline.simulator import base_scenario, simulate


def _transitions(signal):
    return [t for t, _ in signal.samples[1:]]


# ---------------------------------------------------------------- feature

def test_feature_constant_signal():
    assert vibration_feature([SensorSample(t, (0, 0, 9.81)) for t in range(5)]) == 0.0


def test_feature_two_point_population_std():
    assert vibration_feature([SensorSample(0, (0, 0, 9)), SensorSample(1, (0, 0, 11))]) == pytest.approx(1.0)


def test_feature_orientation_invariant():
    a = [SensorSample(0, (0, 0, 9)), SensorSample(1, (0, 0, 11))]
    b = [SensorSample(0, (9, 0, 0)), SensorSample(1, (0, 11, 0))]
    assert vibration_feature(a) == pytest.approx(vibration_feature(b))


def test_feature_running_above_stopped():
    out = simulate(base_scenario(duration_s=60, stops=((20, 40),)))
    s = out.sensor
    run = s[(s.time_ms < 20000)]
    stop = s[(s.time_ms >= 20000) & (s.time_ms < 40000)]
    assert vibration_feature(run) > 10 * vibration_feature(stop)


def test_feature_empty_window():
    with pytest.raises(ValidationError):
        vibration_feature([])


def test_windowed_std_matches_direct_computation():
    rng = np.random.default_rng(1)
    t = np.cumsum(rng.integers(5, 15, 300)).astype(float)
    v = rng.normal(0, 1, 300)
    got = windowed_std(t, v, 200.0)
    for i in range(0, 300, 17):
        sel = (t >= t[i] - 100) & (t < t[i] + 100)
        assert got[i] == pytest.approx(np.std(v[sel]), abs=1e-9)


# ---------------------------------------------------------------- thresholds

def test_otsu_separates_two_modes():
    v = np.r_[np.full(50, 0.02), np.full(50, 0.5)]
    t, lo, hi, pooled = otsu_threshold(v)
    assert lo == pytest.approx(0.02) and hi == pytest.approx(0.5)
    assert 0.02 < t < 0.5 and pooled == pytest.approx(0.0)


def test_auto_thresholds_ten_percent_of_separation():
    v = np.r_[np.full(50, 0.0), np.full(50, 1.0)]
    run, stop = auto_thresholds(v)
    assert run == pytest.approx(0.6) and stop == pytest.approx(0.4)


def test_unimodal_features_refuse_calibration():
    with pytest.raises(CalibrationError, match="manual"):
        auto_thresholds(np.random.default_rng(0).normal(1.0, 0.1, 1000))


def test_hysteresis_holds_between_thresholds():
    f = np.array([0.1, 0.5, 0.9, 0.5, 0.3, 0.1, 0.5])
    assert hysteresis(f, 0.8, 0.2).tolist() == [0, 0, 1, 1, 1, 0, 0]


# ---------------------------------------------------------------- classification

def test_all_quiet_session_is_stopped():
    s, _ = square_wave_sensor(120, 0, 120, start_running=False)
    sig = classify_run_stop(s)
    assert sig.samples == ((0, STOPPED),)
    ev = downtime_events(sig, (0, 120000))
    assert total_downtime(ev) == pytest.approx(120.0, abs=0.01)


def test_all_running_session_has_no_downtime():
    s, _ = square_wave_sensor(120, 120, 0)
    sig = classify_run_stop(s)
    assert sig.samples == ((0, RUNNING),)
    assert downtime_events(sig, (0, 120000)) == []


def test_square_wave_edges_within_window():
    s, stops = square_wave_sensor(600, 60, 30, seed=4)
    cfg = AvailabilityConfig()
    sig = classify_run_stop(s, cfg, session=(0, 600000))
    truth = [t for iv in stops for t in iv if 0 < t < 600000]
    got = _transitions(sig)
    assert len(got) == len(truth)
    assert max(abs(a - b) for a, b in zip(got, truth)) <= cfg.window_s * 1000


def test_blip_during_stop_suppressed():
    s, _ = square_wave_sensor(60, 20, 40, seed=2)
    t, acc = s.time_ms, s.accel.copy()
    blip = (t >= 40000) & (t < 40500)
    acc[blip] *= 1 + np.random.default_rng(0).normal(0, 0.05, (blip.sum(), 1))
    sig = classify_run_stop(SensorSeries(t, acc))
    assert len(sig.samples) == 2


def test_manual_mode_uses_given_thresholds():
    s, stops = square_wave_sensor(180, 60, 30, seed=1)
    cfg = AvailabilityConfig(threshold_mode="manual", run_threshold=0.3, stop_threshold=0.1)
    sig = classify_run_stop(s, cfg)
    assert _transitions(sig) == pytest.approx([t for iv in stops for t in iv if t < 180000], abs=1000)


def test_manual_mode_needs_ordered_thresholds():
    with pytest.raises(ValidationError):
        AvailabilityConfig(threshold_mode="manual", run_threshold=0.1, stop_threshold=0.3)
    with pytest.raises(ValidationError):
        AvailabilityConfig(threshold_mode="manual")


def test_scaling_accelerations_changes_nothing():
    s, _ = square_wave_sensor(400, 60, 30, seed=6)
    a = classify_run_stop(s)
    for c in (0.1, 10.0):
        assert classify_run_stop(s.scaled(c)) == a


def test_estimator_protocol():
    s, _ = square_wave_sensor(200, 60, 30, seed=3)
    clf = RunStopClassifier(window_s=0.5)
    assert clf.get_params()["window_s"] == 0.5
    fitted = clone(clf).fit(s)
    assert fitted.stop_threshold_ < fitted.run_threshold_
    assert fitted.predict(s) == clf.fit_predict(s)
    assert clf.config == AvailabilityConfig(window_s=0.5)


def test_predict_before_fit():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        RunStopClassifier().predict(square_wave_sensor(10, 5, 5)[0])


def test_monotone_in_extra_stop():
    base = base_scenario(duration_s=400, stops=((60, 120),))
    more = base_scenario(duration_s=400, stops=((60, 120), (250, 290)))
    d = []
    for sc in (base, more):
        out = simulate(sc)
        sig = classify_run_stop(out.sensor, session=(0, sc.duration_ms))
        d.append(total_downtime_ms(downtime_events(sig, (0, sc.duration_ms))))
    assert d[1] > d[0]
    assert d[0] == pytest.approx(60000, abs=10)
    assert d[1] == pytest.approx(100000, abs=20)


# ---------------------------------------------------------------- downtime

def test_downtime_examples():
    sig = RunStopSignal.from_stop_intervals([(10000, 20000), (50000, 55000)], 0, 60000)
    ev = downtime_events(sig, (0, 60000))
    assert ev == [DowntimeEvent(10000, 20000), DowntimeEvent(50000, 55000)]
    assert total_downtime(ev) == 15.0
    assert total_downtime([]) == 0
    assert downtime_events(RunStopSignal(((0, RUNNING),), 60000), (0, 60000)) == []
    tail = RunStopSignal.from_stop_intervals([(55000, 70000)], 0, 70000)
    assert downtime_events(tail, (0, 60000)) == [DowntimeEvent(55000, 60000)]


def test_signal_invariants_enforced():
    with pytest.raises(ValidationError):
        RunStopSignal(((0, 1), (10, 1)), 20)
    with pytest.raises(ValidationError):
        RunStopSignal(((0, 2),), 20)
    with pytest.raises(ValidationError):
        DowntimeEvent(5, 5)


@st.composite
def signals(draw):
    n = draw(st.integers(1, 12))
    gaps = draw(st.lists(st.integers(1, 10000), min_size=n, max_size=n))
    s0 = draw(st.sampled_from([0, 1]))
    t, runs = 0, []
    for k, g in enumerate(gaps):
        runs.append((t, (s0 + k) % 2))
        t += g
    return RunStopSignal.from_runs(runs, t)


@given(signals())
def test_downtime_plus_running_is_session(sig):
    t0, t1 = sig.start, sig.end
    down = total_downtime_ms(downtime_events(sig, (t0, t1)))
    assert down + sig.time_in(RUNNING, t0, t1) == t1 - t0


@given(signals(), st.integers(0, 5000))
def test_debounce_idempotent(sig, limit):
    once = debounce(sig, limit)
    assert debounce(once, limit) == once
    segs = once.segments()
    assert all(b - a >= limit for a, b, _ in segs[1:-1])
