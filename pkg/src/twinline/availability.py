"""Run/stop classification from motor acceleration, and downtime.

The feature is the standard deviation of the acceleration magnitude over a
centred time window: magnitude does not depend on how the sensor is mounted,
and the standard deviation removes gravity's constant offset.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import CalibrationError, ValidationError, check_positive
from .core import Timestamp
from .ingest import SensorSample, SensorSeries

log = logging.getLogger(__name__)

RUNNING = 1
STOPPED = 0
# vibration std over static |accel| above which a single-mode session counts as running
SINGLE_STATE_RELATIVE_LEVEL = 0.01


@dataclass(frozen=True)
class DowntimeEvent:
    t_stop: Timestamp
    t_start: Timestamp

    def __post_init__(self):
        if not self.t_stop < self.t_start:
            raise ValidationError(f"t_stop: must precede t_start ({self.t_stop}, {self.t_start})")

    @property
    def duration_ms(self) -> int:
        return self.t_start - self.t_stop


@dataclass(frozen=True)
class RunStopSignal:
    """Piecewise-constant line state.

    ``samples`` lists ``(time, state)`` change points with strictly
    alternating states; the first entry is the session start and the state
    holds until the next change or ``end``.
    """

    samples: Tuple[Tuple[Timestamp, int], ...]
    end: Timestamp

    def __post_init__(self):
        prev_t, prev_s = None, None
        for t, s in self.samples:
            if s not in (RUNNING, STOPPED):
                raise ValidationError(f"state: must be 0 or 1, got {s!r}")
            if prev_s is not None and s == prev_s:
                raise ValidationError("state: consecutive duplicate states in change list")
            if prev_t is not None and t <= prev_t:
                raise ValidationError("time: change points must be strictly increasing")
            prev_t, prev_s = t, s
        if self.samples and self.end < self.samples[-1][0]:
            raise ValidationError("end: precedes last change point")

    @classmethod
    def from_runs(cls, runs: Iterable[Tuple[Timestamp, int]], end: Timestamp) -> "RunStopSignal":
        """Build from change points, collapsing repeated states."""
        out: List[Tuple[int, int]] = []
        for t, s in runs:
            if out and out[-1][1] == s:
                continue
            if out and out[-1][0] == t:
                out[-1] = (t, s)
                if len(out) > 1 and out[-2][1] == s:
                    out.pop()
                continue
            out.append((int(t), int(s)))
        return cls(tuple(out), int(end))

    @classmethod
    def from_stop_intervals(
        cls, stops: Sequence[Tuple[Timestamp, Timestamp]], start: Timestamp, end: Timestamp
    ) -> "RunStopSignal":
        runs = [(start, RUNNING)]
        for lo, hi in stops:
            lo, hi = max(lo, start), min(hi, end)
            if lo >= hi:
                continue
            runs.append((lo, STOPPED))
            if hi < end:
                runs.append((hi, RUNNING))
        return cls.from_runs(runs, end)

    @property
    def start(self) -> Timestamp:
        return self.samples[0][0] if self.samples else self.end

    def segments(self) -> List[Tuple[Timestamp, Timestamp, int]]:
        out = []
        for i, (t, s) in enumerate(self.samples):
            hi = self.samples[i + 1][0] if i + 1 < len(self.samples) else self.end
            if hi > t:
                out.append((t, hi, s))
        return out

    def intervals_within(self, state: int, lo: Timestamp, hi: Timestamp) -> List[Tuple[Timestamp, Timestamp]]:
        out = []
        for a, b, s in self.segments():
            if s != state:
                continue
            a, b = max(a, lo), min(b, hi)
            if a < b:
                out.append((a, b))
        return out

    def time_in(self, state: int, lo: Timestamp, hi: Timestamp) -> int:
        return sum(b - a for a, b in self.intervals_within(state, lo, hi))

    def state_at(self, t: Timestamp) -> int:
        state = self.samples[0][1]
        for ct, s in self.samples:
            if ct > t:
                break
            state = s
        return state

    def to_rows(self) -> List[Tuple[Timestamp, int]]:
        """Two-column dump ``(time_ms, state)``, closed by the end time."""
        rows = list(self.samples)
        if rows:
            rows.append((self.end, rows[-1][1]))
        return rows


@dataclass(frozen=True)
class AvailabilityConfig:
    window_s: float = 1.0
    run_threshold: Optional[float] = None
    stop_threshold: Optional[float] = None
    min_state_duration_s: float = 2.0
    threshold_mode: str = "auto"
    refine_edges: bool = True

    def __post_init__(self):
        check_positive(self.window_s, "window_s")
        if self.min_state_duration_s < 0:
            raise ValidationError("min_state_duration_s: must be >= 0")
        if self.threshold_mode not in ("auto", "manual"):
            raise ValidationError(f"threshold_mode: expected 'auto' or 'manual', got {self.threshold_mode!r}")
        if self.threshold_mode == "manual":
            if self.run_threshold is None or self.stop_threshold is None:
                raise ValidationError("run_threshold: manual mode needs both thresholds")
            if not self.stop_threshold < self.run_threshold:
                raise ValidationError("stop_threshold: must be below run_threshold")


# ------------------------------------------------------------------ features


def vibration_feature(samples: Sequence[SensorSample]) -> float:
    """Population standard deviation of |accel| over the given samples."""
    if len(samples) == 0:
        raise ValidationError("samples: window is empty")
    if isinstance(samples, SensorSeries):
        mag = samples.magnitude
    else:
        acc = np.array([s.accel for s in samples], dtype=float)
        mag = np.sqrt((acc ** 2).sum(axis=1))
    return float(np.std(mag))


def windowed_std(times: np.ndarray, values: np.ndarray, window_ms: float) -> np.ndarray:
    """Std of ``values`` over ``[t - w/2, t + w/2)`` around every sample."""
    x = values - values.mean()
    c1 = np.concatenate([[0.0], np.cumsum(x)])
    c2 = np.concatenate([[0.0], np.cumsum(x * x)])
    lo = np.searchsorted(times, times - window_ms / 2.0, side="left")
    hi = np.searchsorted(times, times + window_ms / 2.0, side="left")
    hi = np.maximum(hi, lo + 1)
    n = hi - lo
    mean = (c1[hi] - c1[lo]) / n
    var = (c2[hi] - c2[lo]) / n - mean * mean
    return np.sqrt(np.clip(var, 0.0, None))


def otsu_threshold(values: np.ndarray) -> Tuple[float, float, float, float]:
    """Split maximising between-class variance over the sorted values.

    Returns ``(threshold, low_mean, high_mean, pooled_std)``; the threshold is
    the midpoint between the two values on either side of the best split.
    """
    v = np.sort(np.asarray(values, dtype=float))
    n = len(v)
    if n < 2 or v[0] == v[-1]:
        raise CalibrationError("feature histogram is degenerate; set thresholds manually")
    c1 = np.cumsum(v)
    k = np.arange(1, n)
    w0 = k / n
    mu0 = c1[:-1] / k
    mu1 = (c1[-1] - c1[:-1]) / (n - k)
    between = w0 * (1 - w0) * (mu1 - mu0) ** 2
    # only split between distinct values
    between[v[1:] == v[:-1]] = -1.0
    i = int(np.argmax(between))
    lo, hi = v[: i + 1], v[i + 1:]
    pooled = np.sqrt((lo.var() * len(lo) + hi.var() * len(hi)) / n)
    return 0.5 * (v[i] + v[i + 1]), float(lo.mean()), float(hi.mean()), float(pooled)


def auto_thresholds(features: np.ndarray) -> Tuple[float, float]:
    """``(run_threshold, stop_threshold)`` from a bimodal feature distribution."""
    t, mu_lo, mu_hi, pooled = otsu_threshold(features)
    sep = mu_hi - mu_lo
    if sep < 3.0 * pooled:
        raise CalibrationError(
            f"feature distribution looks unimodal (mode separation {sep:.4g} < 3 x pooled std "
            f"{pooled:.4g}); set run_threshold/stop_threshold and threshold_mode='manual'"
        )
    return t + 0.1 * sep, t - 0.1 * sep


def hysteresis(features: np.ndarray, run_threshold: float, stop_threshold: float) -> np.ndarray:
    """Two-threshold state machine; the initial state follows the nearer threshold."""
    mark = np.zeros(len(features), dtype=np.int8)
    mark[features >= run_threshold] = 1
    mark[features <= stop_threshold] = -1
    if len(features) == 0:
        return mark.astype(np.int64)
    if mark[0] == 0:
        mark[0] = 1 if features[0] >= 0.5 * (run_threshold + stop_threshold) else -1
    idx = np.where(mark != 0, np.arange(len(mark)), 0)
    np.maximum.accumulate(idx, out=idx)
    return (mark[idx] > 0).astype(np.int64)


def debounce(signal: RunStopSignal, min_duration_ms: float) -> RunStopSignal:
    """Flip interior runs shorter than ``min_duration_ms``, shortest first.

    Runs touching the session bounds are kept. The result has no interior run
    shorter than the limit, so applying it twice changes nothing.
    """
    segs = [list(s) for s in signal.segments()]
    while len(segs) > 2:
        interior = [(segs[i][1] - segs[i][0], i) for i in range(1, len(segs) - 1)]
        dur, i = min(interior)
        if dur >= min_duration_ms:
            break
        # absorb the short run and its successor into the predecessor
        segs[i - 1][1] = segs[i + 1][1]
        del segs[i:i + 2]
    return RunStopSignal.from_runs([(a, s) for a, _, s in segs], signal.end)


def _refine_edge(mag: np.ndarray, lo: int, hi: int) -> int:
    """Index of the first sample after a variance change point in ``mag[lo:hi]``."""
    x = mag[lo:hi]
    n = len(x)
    if n < 6:
        return -1
    x = x - x.mean()
    c1 = np.cumsum(x)
    c2 = np.cumsum(x * x)
    k = np.arange(2, n - 1)
    n1 = k.astype(float)
    n2 = n - n1
    m1 = c1[k - 1] / n1
    v1 = c2[k - 1] / n1 - m1 * m1
    m2 = (c1[-1] - c1[k - 1]) / n2
    v2 = (c2[-1] - c2[k - 1]) / n2 - m2 * m2
    floor = 1e-12 * max(float(x.var()), 1e-300)
    cost = n1 * np.log(np.maximum(v1, floor)) + n2 * np.log(np.maximum(v2, floor))
    return lo + int(k[int(np.argmin(cost))])


class RunStopClassifier(BaseEstimator):
    """Classify the line as running (1) or stopped (0) from accelerometer data.

    ``fit`` calibrates the thresholds (auto mode) from the feature
    distribution; ``predict`` returns a :class:`RunStopSignal`.
    """

    def __init__(
        self,
        window_s: float = 1.0,
        run_threshold: Optional[float] = None,
        stop_threshold: Optional[float] = None,
        min_state_duration_s: float = 2.0,
        threshold_mode: str = "auto",
        refine_edges: bool = True,
    ):
        self.window_s = window_s
        self.run_threshold = run_threshold
        self.stop_threshold = stop_threshold
        self.min_state_duration_s = min_state_duration_s
        self.threshold_mode = threshold_mode
        self.refine_edges = refine_edges

    @classmethod
    def from_config(cls, cfg: AvailabilityConfig) -> "RunStopClassifier":
        return cls(**cfg.__dict__)

    @property
    def config(self) -> AvailabilityConfig:
        return AvailabilityConfig(**self.get_params())

    def _series(self, X) -> SensorSeries:
        if isinstance(X, SensorSeries):
            return X
        return SensorSeries.from_samples(X)

    def features(self, X) -> np.ndarray:
        s = self._series(X)
        return windowed_std(s.time_ms.astype(float), s.magnitude, self.window_s * 1000.0)

    def fit(self, X, y=None) -> "RunStopClassifier":
        cfg = self.config
        if cfg.threshold_mode == "manual":
            self.run_threshold_, self.stop_threshold_ = cfg.run_threshold, cfg.stop_threshold
        else:
            s = self._series(X)
            f = self.features(s)
            if len(f) == 0:
                raise CalibrationError("no sensor samples to calibrate on")
            try:
                self.run_threshold_, self.stop_threshold_ = auto_thresholds(f)
                self.single_state_ = None
            except CalibrationError:
                # one mode only: the session never changed state. Vibration
                # relative to the static magnitude decides which state it was.
                rel = float(np.median(f)) / max(float(np.median(s.magnitude)), 1e-12)
                self.single_state_ = RUNNING if rel >= SINGLE_STATE_RELATIVE_LEVEL else STOPPED
                level = -1.0 if self.single_state_ == RUNNING else np.inf
                self.run_threshold_, self.stop_threshold_ = level, level
                log.warning("sensor features are unimodal; whole session classified as %s",
                            "running" if self.single_state_ == RUNNING else "stopped")
        return self

    def predict(self, X, session: Optional[Tuple[Timestamp, Timestamp]] = None) -> RunStopSignal:
        check_is_fitted(self, "run_threshold_")
        s = self._series(X)
        t = s.time_ms
        if len(t) == 0:
            raise ValidationError("samples: no sensor samples")
        start, end = session if session is not None else (int(t[0]), int(t[-1]) + s.sample_period_ms)
        mag = s.magnitude
        f = windowed_std(t.astype(float), mag, self.window_s * 1000.0)
        state = hysteresis(f, self.run_threshold_, self.stop_threshold_)
        change = np.flatnonzero(np.diff(state)) + 1
        runs = [(start, int(state[0]))] + [(int(t[i]), int(state[i])) for i in change]
        signal = debounce(RunStopSignal.from_runs(runs, end), self.min_state_duration_s * 1000.0)
        if self.refine_edges and len(signal.samples) > 1:
            signal = self._refine(signal, t, mag)
        return signal

    def fit_predict(self, X, y=None, session=None) -> RunStopSignal:
        return self.fit(X).predict(X, session=session)

    def _refine(self, signal: RunStopSignal, t: np.ndarray, mag: np.ndarray) -> RunStopSignal:
        """Move each change point to the variance change point nearby."""
        w = self.window_s * 1000.0
        pts = list(signal.samples)
        out = [pts[0]]
        for j in range(1, len(pts)):
            tc, s = pts[j]
            left = max(tc - w, (pts[j - 1][0] + tc) / 2.0)
            right = tc + w
            if j + 1 < len(pts):
                right = min(right, (tc + pts[j + 1][0]) / 2.0)
            lo = int(np.searchsorted(t, left, side="left"))
            hi = int(np.searchsorted(t, right, side="right"))
            k = _refine_edge(mag, lo, hi)
            out.append((int(t[k]), s) if k >= 0 else (tc, s))
        return RunStopSignal.from_runs(out, signal.end)


def classify_run_stop(samples, cfg: Optional[AvailabilityConfig] = None,
                      session: Optional[Tuple[Timestamp, Timestamp]] = None) -> RunStopSignal:
    cfg = cfg or AvailabilityConfig()
    return RunStopClassifier.from_config(cfg).fit_predict(samples, session=session)


def downtime_events(signal: RunStopSignal, session: Tuple[Timestamp, Timestamp]) -> List[DowntimeEvent]:
    """Maximal stopped intervals clipped to ``session``."""
    t0, t1 = session
    return [DowntimeEvent(a, b) for a, b in signal.intervals_within(STOPPED, t0, t1)]


def total_downtime(events: Iterable[DowntimeEvent]) -> float:
    """Total downtime in seconds."""
    return sum(e.t_start - e.t_stop for e in events) / 1000.0


def total_downtime_ms(events: Iterable[DowntimeEvent]) -> int:
    return sum(e.t_start - e.t_stop for e in events)
