"""Two-stage (high/low confidence) tracking-by-detection for one camera.

State per track is ``(cx, cy, w, h, vx, vy)`` in pixels and pixels/second,
propagated with a constant-velocity linear-Gaussian model. Time steps are
real seconds derived from frame timestamps, so cameras with very different
frame rates age their tracks consistently.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.base import BaseEstimator

from ._validation import ContractError, ValidationError, check_positive
from .core import BoundingBox, Detection, Timestamp

TENTATIVE = "tentative"
CONFIRMED = "confirmed"
LOST = "lost"

_H = np.hstack([np.eye(4), np.zeros((4, 2))])


@dataclass(frozen=True)
class TrackerConfig:
    high_conf_threshold: float = 0.5
    low_conf_threshold: float = 0.1
    iou_gate_stage1: float = 0.3
    iou_gate_stage2: float = 0.5
    new_track_conf: float = 0.6
    min_hits: int = 3
    max_age_s: float = 1.0
    # process noise densities, per sqrt(second)
    process_pos_std: float = 2.0
    process_size_std: float = 1.0
    process_vel_std: float = 60.0
    # measurement noise, pixels
    measurement_pos_std: float = 2.0
    measurement_size_std: float = 2.0
    initial_vel_std: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.low_conf_threshold < self.high_conf_threshold <= 1.0:
            raise ValidationError("low_conf_threshold: need 0 <= low < high <= 1")
        for name in ("iou_gate_stage1", "iou_gate_stage2"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValidationError(f"{name}: must lie in (0, 1], got {v}")
        if self.min_hits < 1:
            raise ValidationError("min_hits: must be >= 1")
        check_positive(self.max_age_s, "max_age_s")
        for name in ("measurement_pos_std", "measurement_size_std", "initial_vel_std"):
            check_positive(getattr(self, name), name)

    def process_noise(self, dt: float) -> np.ndarray:
        q = np.array(
            [self.process_pos_std, self.process_pos_std, self.process_size_std,
             self.process_size_std, self.process_vel_std, self.process_vel_std]
        ) ** 2
        return np.diag(q * dt)

    def measurement_noise(self) -> np.ndarray:
        r = np.array(
            [self.measurement_pos_std, self.measurement_pos_std,
             self.measurement_size_std, self.measurement_size_std]
        ) ** 2
        return np.diag(r)


@dataclass(frozen=True)
class TrackState:
    mean: np.ndarray
    covariance: np.ndarray
    last_update: Timestamp

    @property
    def bbox(self) -> BoundingBox:
        cx, cy, w, h = self.mean[:4]
        return BoundingBox.from_cxcywh(cx, cy, max(w, 1e-6), max(h, 1e-6))


@dataclass(frozen=True)
class Track:
    track_id: int
    camera: int
    state: TrackState
    status: str = TENTATIVE
    hits: int = 1
    age_since_update: int = 0


class TrackSnapshot(NamedTuple):
    """A confirmed track as observed in one frame.

    ``bbox`` and ``confidence`` are those of the detection that updated the
    track in this frame; ``mean`` is the filtered state after the update.
    """

    time: Timestamp
    camera: int
    track_id: int
    bbox: BoundingBox
    confidence: float
    status: str = CONFIRMED
    mean: Tuple[float, ...] = ()


# ----------------------------------------------------------------- kernels


def _transition(dt: float) -> np.ndarray:
    F = np.eye(6)
    F[0, 4] = F[1, 5] = dt
    return F


def _predict_batch(mean: np.ndarray, cov: np.ndarray, dt: float, cfg: TrackerConfig):
    if dt == 0.0:
        return mean, cov
    F = _transition(dt)
    mean = mean @ F.T
    cov = F @ cov @ F.T + cfg.process_noise(dt)
    return mean, cov


def _update_batch(mean: np.ndarray, cov: np.ndarray, z: np.ndarray, cfg: TrackerConfig):
    """Joseph-form measurement update on (cx, cy, w, h); velocity is unobserved."""
    R = cfg.measurement_noise()
    S = cov[:, :4, :4] + R
    PHt = cov[:, :, :4]
    K = np.linalg.solve(S, PHt.transpose(0, 2, 1)).transpose(0, 2, 1)
    innov = z - mean[:, :4]
    mean = mean + np.einsum("nij,nj->ni", K, innov)
    IKH = np.eye(6) - K @ _H
    cov = IKH @ cov @ IKH.transpose(0, 2, 1) + K @ R @ K.transpose(0, 2, 1)
    cov = 0.5 * (cov + cov.transpose(0, 2, 1))
    return mean, cov


def _initiate(z: np.ndarray, cfg: TrackerConfig):
    n = len(z)
    mean = np.zeros((n, 6))
    mean[:, :4] = z
    std = np.array(
        [cfg.measurement_pos_std, cfg.measurement_pos_std, cfg.measurement_size_std,
         cfg.measurement_size_std, cfg.initial_vel_std, cfg.initial_vel_std]
    )
    cov = np.broadcast_to(np.diag(std ** 2), (n, 6, 6)).copy()
    return mean, cov


def _xyxy_from_mean(mean: np.ndarray) -> np.ndarray:
    cx, cy = mean[:, 0], mean[:, 1]
    w = np.maximum(mean[:, 2], 1e-6)
    h = np.maximum(mean[:, 3], 1e-6)
    return np.column_stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` xyxy arrays."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def assign_max_iou(ious: np.ndarray, gate: float) -> List[Tuple[int, int]]:
    """Optimal one-to-one assignment maximising summed IoU over gated pairs.

    Pairs below ``gate`` are never matched. Rows and columns keep their input
    order, which callers use to break ties (lower track id, lower detection
    index first).
    """
    if ious.size == 0:
        return []
    allowed = ious >= gate
    if not allowed.any():
        return []
    weight = np.where(allowed, ious, 0.0)
    rows, cols = linear_sum_assignment(weight, maximize=True)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if allowed[r, c]]


def _det_arrays(dets: Sequence[Detection]):
    boxes = np.array([d.bbox.as_tuple() for d in dets], dtype=float).reshape(-1, 4)
    conf = np.array([d.confidence for d in dets], dtype=float)
    return boxes, conf


def _xyxy_to_z(boxes: np.ndarray) -> np.ndarray:
    return np.column_stack(
        [(boxes[:, 0] + boxes[:, 2]) / 2, (boxes[:, 1] + boxes[:, 3]) / 2,
         boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]]
    )


# ---------------------------------------------------------- public kernels


def predict(track: Track, to_time: Timestamp, cfg: Optional[TrackerConfig] = None) -> Track:
    """Propagate one track to ``to_time`` under constant velocity.

    The returned state is stamped ``to_time``, so predicting again from it
    only covers the extra interval.
    """
    cfg = cfg or TrackerConfig()
    if to_time < track.state.last_update:
        raise ContractError(
            f"predict: target time {to_time} precedes last update {track.state.last_update}"
        )
    dt = (to_time - track.state.last_update) / 1000.0
    mean, cov = _predict_batch(track.state.mean[None, :], track.state.covariance[None], dt, cfg)
    return replace(track, state=TrackState(mean[0], cov[0], to_time))


@dataclass
class Association:
    matches: List[Tuple[int, int]]
    unmatched_tracks: List[int]
    unmatched_dets: List[int]


def associate_frame(
    tracks: Sequence[Track], dets: Sequence[Detection], cfg: Optional[TrackerConfig] = None
) -> Association:
    """Match predicted tracks to one frame's detections.

    Stage 1 pairs confirmed tracks with high-confidence detections, stage 2
    gives the confirmed tracks left over a chance at low-confidence ones, and
    a final pass offers the remaining high-confidence detections to tentative
    tracks. Indices refer to the input sequences.
    """
    cfg = cfg or TrackerConfig()
    if dets:
        times = {d.time for d in dets}
        cams = {d.camera for d in dets}
        if len(cams) > 1:
            raise ContractError("associate_frame: detections span several cameras")
        if max(times) - min(times) >= 1:
            raise ContractError("associate_frame: detections span several frame times")
    order = sorted(range(len(tracks)), key=lambda i: tracks[i].track_id)
    boxes = np.array([tracks[i].state.bbox.as_tuple() for i in order], dtype=float).reshape(-1, 4)
    confirmed = np.array([tracks[i].status == CONFIRMED for i in order], dtype=bool)
    det_boxes, conf = _det_arrays(dets)
    m = _associate(boxes, confirmed, det_boxes, conf, cfg)
    matches = [(order[t], d) for t, d in m]
    mt = {t for t, _ in matches}
    md = {d for _, d in matches}
    return Association(
        matches=sorted(matches),
        unmatched_tracks=[i for i in range(len(tracks)) if i not in mt],
        unmatched_dets=[j for j in range(len(dets)) if j not in md],
    )


def _associate(track_boxes, confirmed, det_boxes, conf, cfg: TrackerConfig) -> List[Tuple[int, int]]:
    """Core association over arrays; rows are assumed ordered by track id."""
    n, m = len(track_boxes), len(det_boxes)
    if n == 0 or m == 0:
        return []
    ious = iou_matrix(track_boxes, det_boxes)
    high = np.flatnonzero(conf >= cfg.high_conf_threshold)
    low = np.flatnonzero((conf >= cfg.low_conf_threshold) & (conf < cfg.high_conf_threshold))
    conf_rows = np.flatnonzero(confirmed)
    tent_rows = np.flatnonzero(~confirmed)
    matches: List[Tuple[int, int]] = []

    def run(rows, cols, gate):
        if len(rows) == 0 or len(cols) == 0:
            return [], rows, cols
        pairs = assign_max_iou(ious[np.ix_(rows, cols)], gate)
        got = [(int(rows[r]), int(cols[c])) for r, c in pairs]
        used_r = {r for r, _ in pairs}
        used_c = {c for _, c in pairs}
        rest_r = np.array([rows[i] for i in range(len(rows)) if i not in used_r], dtype=int)
        rest_c = np.array([cols[j] for j in range(len(cols)) if j not in used_c], dtype=int)
        return got, rest_r, rest_c

    got, conf_rows, high = run(conf_rows, high, cfg.iou_gate_stage1)
    matches += got
    got, conf_rows, low = run(conf_rows, low, cfg.iou_gate_stage2)
    matches += got
    got, _, _ = run(tent_rows, high, cfg.iou_gate_stage1)
    matches += got
    return matches


# ------------------------------------------------------------------ tracker


class _Row:
    """Mutable per-track filter state.

    The constant-velocity model with diagonal noise decouples into two
    identical (position, velocity) blocks for x and y plus one size block
    shared by w and h, so one 2x2 covariance ``(p00, p01, p11)`` and one size
    variance ``ps`` describe the full 6x6 covariance exactly.
    """

    __slots__ = ("id", "cx", "cy", "w", "h", "vx", "vy", "p00", "p01", "p11", "ps",
                 "last", "hits", "age", "confirmed")

    def mean(self) -> Tuple[float, ...]:
        return (self.cx, self.cy, self.w, self.h, self.vx, self.vy)

    def covariance(self) -> np.ndarray:
        c = np.zeros((6, 6))
        for i, j in ((0, 4), (1, 5)):
            c[i, i], c[i, j], c[j, i], c[j, j] = self.p00, self.p01, self.p01, self.p11
        c[2, 2] = c[3, 3] = self.ps
        return c

    def box(self) -> Tuple[float, float, float, float]:
        w = self.w if self.w > 1e-6 else 1e-6
        h = self.h if self.h > 1e-6 else 1e-6
        return (self.cx - w / 2, self.cy - h / 2, self.cx + w / 2, self.cy + h / 2)


def _assign(ious: dict, rows: List[int], cols: List[int], gate: float) -> List[Tuple[int, int]]:
    """Gated max-IoU assignment over index lists; ``ious`` maps (row, col) -> IoU."""
    rs, cs = set(rows), set(cols)
    cand = sorted(rc for rc, v in ious.items() if v >= gate and rc[0] in rs and rc[1] in cs)
    if not cand:
        return []
    rs = [r for r, _ in cand]
    cs = [c for _, c in cand]
    if len(set(rs)) == len(rs) and len(set(cs)) == len(cs):
        # no conflicts: every gated pair is in the optimum
        return cand
    ur, uc = sorted(set(rs)), sorted(set(cs))
    w = np.zeros((len(ur), len(uc)))
    ri = {r: i for i, r in enumerate(ur)}
    ci = {c: j for j, c in enumerate(uc)}
    for r, c in cand:
        w[ri[r], ci[c]] = ious[(r, c)]
    return [(ur[i], uc[j]) for i, j in (p for p in assign_max_iou(w, gate))]


class ByteTracker(BaseEstimator):
    """Per-camera multi-object tracker.

    Parameters mirror :class:`TrackerConfig`. Feed frames in time order with
    :meth:`step`; :meth:`fit_transform` resets and runs a whole frame list.
    """

    def __init__(
        self,
        camera: Optional[int] = None,
        high_conf_threshold: float = 0.5,
        low_conf_threshold: float = 0.1,
        iou_gate_stage1: float = 0.3,
        iou_gate_stage2: float = 0.5,
        new_track_conf: float = 0.6,
        min_hits: int = 3,
        max_age_s: float = 1.0,
        process_pos_std: float = 2.0,
        process_size_std: float = 1.0,
        process_vel_std: float = 60.0,
        measurement_pos_std: float = 2.0,
        measurement_size_std: float = 2.0,
        initial_vel_std: float = 100.0,
    ):
        self.camera = camera
        self.high_conf_threshold = high_conf_threshold
        self.low_conf_threshold = low_conf_threshold
        self.iou_gate_stage1 = iou_gate_stage1
        self.iou_gate_stage2 = iou_gate_stage2
        self.new_track_conf = new_track_conf
        self.min_hits = min_hits
        self.max_age_s = max_age_s
        self.process_pos_std = process_pos_std
        self.process_size_std = process_size_std
        self.process_vel_std = process_vel_std
        self.measurement_pos_std = measurement_pos_std
        self.measurement_size_std = measurement_size_std
        self.initial_vel_std = initial_vel_std

    @classmethod
    def from_config(cls, cfg: TrackerConfig, camera: Optional[int] = None) -> "ByteTracker":
        return cls(camera=camera, **cfg.__dict__)

    @property
    def config(self) -> TrackerConfig:
        params = self.get_params()
        params.pop("camera")
        return TrackerConfig(**params)

    def reset(self) -> "ByteTracker":
        self.config_ = cfg = self.config
        self.camera_ = self.camera
        self._rows: List[_Row] = []
        self._t: Optional[int] = None
        self.next_id_ = 1
        self.n_lost_ = 0
        self._qp = cfg.process_pos_std ** 2
        self._qv = cfg.process_vel_std ** 2
        self._qs = cfg.process_size_std ** 2
        self._rp = cfg.measurement_pos_std ** 2
        self._rs = cfg.measurement_size_std ** 2
        self._p0v = cfg.initial_vel_std ** 2
        self._max_age_ms = cfg.max_age_s * 1000.0
        self._new_conf = max(cfg.new_track_conf, cfg.high_conf_threshold)
        return self

    def _ensure(self):
        if not hasattr(self, "_rows"):
            self.reset()

    @property
    def tracks(self) -> List[Track]:
        """Live tracks as value objects, ordered by id."""
        self._ensure()
        return [
            Track(
                track_id=r.id,
                camera=self.camera_,
                state=TrackState(np.array(r.mean()), r.covariance(), r.last),
                status=CONFIRMED if r.confirmed else TENTATIVE,
                hits=r.hits,
                age_since_update=r.age,
            )
            for r in self._rows
        ]

    def _predict(self, dt: float) -> None:
        if dt <= 0.0:
            for r in self._rows:
                r.age += 1
            return
        qp, qv, qs = self._qp * dt, self._qv * dt, self._qs * dt
        dt2 = dt * dt
        for r in self._rows:
            r.age += 1
            r.cx += dt * r.vx
            r.cy += dt * r.vy
            r.p00 = r.p00 + 2.0 * dt * r.p01 + dt2 * r.p11 + qp
            r.p01 = r.p01 + dt * r.p11
            r.p11 = r.p11 + qv
            r.ps = r.ps + qs

    def _update(self, r: _Row, box) -> None:
        # Joseph-form update of each decoupled block
        rp, rs = self._rp, self._rs
        s = r.p00 + rp
        k0, k1 = r.p00 / s, r.p01 / s
        p00, p01, p11 = r.p00, r.p01, r.p11
        r.p00 = (1.0 - k0) ** 2 * p00 + k0 * k0 * rp
        r.p01 = (1.0 - k0) * (p01 - k1 * p00) + k0 * k1 * rp
        r.p11 = k1 * k1 * p00 - 2.0 * k1 * p01 + p11 + k1 * k1 * rp
        ex = (box[0] + box[2]) / 2 - r.cx
        ey = (box[1] + box[3]) / 2 - r.cy
        r.cx += k0 * ex
        r.cy += k0 * ey
        r.vx += k1 * ex
        r.vy += k1 * ey
        ks = r.ps / (r.ps + rs)
        r.w += ks * ((box[2] - box[0]) - r.w)
        r.h += ks * ((box[3] - box[1]) - r.h)
        r.ps = (1.0 - ks) ** 2 * r.ps + ks * ks * rs

    def step(self, time: Timestamp, detections: Sequence[Detection]) -> List[TrackSnapshot]:
        """Advance to ``time`` with that frame's detections.

        Returns snapshots of confirmed tracks that were updated in this frame.
        """
        self._ensure()
        cfg = self.config_
        if self._t is not None and time < self._t:
            raise ContractError(f"step: frame at {time} ms arrives after frame at {self._t} ms")
        cam = self.camera_
        for d in detections:
            if cam is None:
                cam = self.camera_ = d.camera
            if d.camera != cam:
                raise ContractError(
                    f"step: detection from camera {d.camera} fed to tracker for camera {cam}"
                )
        dt = 0.0 if self._t is None else (time - self._t) / 1000.0
        self._t = time

        rows = self._rows
        if rows:
            horizon = time - self._max_age_ms
            if any(r.last < horizon for r in rows):
                fresh = [r for r in rows if r.last >= horizon]
                self.n_lost_ += len(rows) - len(fresh)
                rows = self._rows = fresh
            self._predict(dt)
        if not detections:
            return []

        boxes = [(b.x_min, b.y_min, b.x_max, b.y_max) for b in (d.bbox for d in detections)]
        matches = self._associate(rows, boxes, [d.confidence for d in detections])

        snapshots: List[TrackSnapshot] = []
        min_hits = cfg.min_hits
        matched_rows = set()
        for ri, di in sorted(matches):
            r = rows[ri]
            self._update(r, boxes[di])
            r.last = time
            r.hits += 1
            r.age = 0
            if r.hits >= min_hits:
                r.confirmed = True
            matched_rows.add(ri)
            if r.confirmed:
                d = detections[di]
                snapshots.append(TrackSnapshot(time, cam, r.id, d.bbox, d.confidence, CONFIRMED, r.mean()))

        # tentative tracks that found no detection are dropped
        kept = [r for i, r in enumerate(rows) if r.confirmed or i in matched_rows]
        if len(kept) != len(rows):
            self.n_lost_ += len(rows) - len(kept)
            self._rows = kept

        used = {di for _, di in matches}
        for j, d in enumerate(detections):
            if j in used or d.confidence < self._new_conf:
                continue
            b = boxes[j]
            r = _Row()
            r.id = self.next_id_
            self.next_id_ += 1
            r.cx, r.cy = (b[0] + b[2]) / 2, (b[1] + b[3]) / 2
            r.w, r.h = b[2] - b[0], b[3] - b[1]
            r.vx = r.vy = 0.0
            r.p00, r.p01, r.p11, r.ps = self._rp, 0.0, self._p0v, self._rs
            r.last, r.hits, r.age = time, 1, 0
            r.confirmed = min_hits <= 1
            self._rows.append(r)
            if r.confirmed:
                snapshots.append(TrackSnapshot(time, cam, r.id, d.bbox, d.confidence, CONFIRMED, r.mean()))
        return snapshots

    def _associate(self, rows: List[_Row], boxes, conf) -> List[Tuple[int, int]]:
        if not rows:
            return []
        cfg = self.config_
        ious = {}
        for i, r in enumerate(rows):
            a0, a1, a2, a3 = r.box()
            area_a = (a2 - a0) * (a3 - a1)
            for j, (b0, b1, b2, b3) in enumerate(boxes):
                iw = (a2 if a2 < b2 else b2) - (a0 if a0 > b0 else b0)
                if iw <= 0.0:
                    continue
                ih = (a3 if a3 < b3 else b3) - (a1 if a1 > b1 else b1)
                if ih <= 0.0:
                    continue
                inter = iw * ih
                ious[(i, j)] = inter / (area_a + (b2 - b0) * (b3 - b1) - inter)
        if not ious:
            return []
        hi_t, lo_t = cfg.high_conf_threshold, cfg.low_conf_threshold
        high = [j for j, c in enumerate(conf) if c >= hi_t]
        conf_rows = [i for i, r in enumerate(rows) if r.confirmed]
        tent_rows = [i for i, r in enumerate(rows) if not r.confirmed]
        matches = _assign(ious, conf_rows, high, cfg.iou_gate_stage1)
        if matches:
            mr = {i for i, _ in matches}
            mc = {j for _, j in matches}
            conf_rows = [i for i in conf_rows if i not in mr]
            high = [j for j in high if j not in mc]
        if conf_rows:
            low = [j for j, c in enumerate(conf) if lo_t <= c < hi_t]
            if low:
                matches += _assign(ious, conf_rows, low, cfg.iou_gate_stage2)
        if tent_rows and high:
            matches += _assign(ious, tent_rows, high, cfg.iou_gate_stage1)
        return matches

    def fit(self, frames: Iterable[Tuple[Timestamp, Sequence[Detection]]], y=None) -> "ByteTracker":
        self.snapshots_ = self.fit_transform(frames)
        return self

    def fit_transform(self, frames: Iterable[Tuple[Timestamp, Sequence[Detection]]], y=None) -> List[TrackSnapshot]:
        """Reset, then run every ``(time, detections)`` frame; returns all snapshots."""
        self.reset()
        out: List[TrackSnapshot] = []
        step = self.step
        for t, dets in frames:
            out.extend(step(t, dets))
        return out


def track_all_cameras(
    frames_by_camera: dict, cfg: Optional[TrackerConfig] = None
) -> dict:
    """Run one independent tracker per camera; returns snapshots per camera."""
    cfg = cfg or TrackerConfig()
    return {
        cam: ByteTracker.from_config(cfg, camera=cam).fit_transform(frames)
        for cam, frames in sorted(frames_by_camera.items())
    }
