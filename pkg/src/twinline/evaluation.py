"""Compare engine reports with the ground-truth ledger."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from ._validation import ValidationError
from .core import MS_PER_MINUTE
from .counting import EdgeCountSeries
from .ingest import FrameTruth, GroundTruthLedger
from .kpi import ledger_kpis
from .tracking import assign_max_iou, iou_matrix

MATCH_IOU = 0.5
NO_FRAME_TRUTH = "ledger has no per-frame truth"
NO_TRACK_DUMP = "report has no track snapshots"


@dataclass
class EdgeError:
    edge_id: int
    pred_cum: List[int]
    truth_cum: List[int]
    count_error_pct: List[float]

    @property
    def mean_count_error_pct(self) -> float:
        return float(np.mean(self.count_error_pct)) if self.count_error_pct else 0.0


@dataclass
class EvalSeries:
    """Per-minute errors of a report against its ledger.

    Counts refer to the pre-inspection edge unless taken from ``edges``.
    ``accuracy_pct`` is None in minutes without a running frame, or for the
    whole series when ``accuracy_reason`` says why it could not be computed.
    """

    minutes: List[int]
    pred_cum: List[int]
    truth_cum: List[int]
    count_error_pct: List[float]
    accuracy_pct: List[Optional[float]]
    pred_oee: List[Optional[float]]
    truth_oee: List[Optional[float]]
    oee_error: List[Optional[float]]
    edges: Dict[int, EdgeError] = field(default_factory=dict)
    accuracy_reason: Optional[str] = None
    pred_session_oee: Optional[float] = None
    truth_session_oee: Optional[float] = None

    @property
    def mean_count_error_pct(self) -> float:
        return float(np.mean(self.count_error_pct)) if self.count_error_pct else 0.0

    @property
    def mean_oee_error_pct(self) -> float:
        vals = [e for e in self.oee_error if e is not None]
        return 100.0 * float(np.mean(vals)) if vals else 0.0

    @property
    def max_accuracy_pct(self) -> Optional[float]:
        vals = [a for a in self.accuracy_pct if a is not None]
        return max(vals) if vals else None

    @property
    def mean_accuracy_pct(self) -> Optional[float]:
        vals = [a for a in self.accuracy_pct if a is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def session_oee_error(self) -> Optional[float]:
        if self.pred_session_oee is None or self.truth_session_oee is None:
            return None
        return abs(self.pred_session_oee - self.truth_session_oee)

    def summary(self) -> dict:
        return {
            "mean_count_error_pct": self.mean_count_error_pct,
            "mean_oee_error_pct": self.mean_oee_error_pct,
            "max_accuracy_pct": self.max_accuracy_pct,
            "mean_accuracy_pct": self.mean_accuracy_pct,
            "session_oee_error": self.session_oee_error,
            "accuracy_reason": self.accuracy_reason,
            "edge_mean_count_error_pct": {str(k): v.mean_count_error_pct for k, v in sorted(self.edges.items())},
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        extra = sorted(self.edges)
        header = ["minute", "pred_cum", "truth_cum", "count_error_pct", "accuracy_pct", "pred_oee", "truth_oee",
                  "oee_error"]
        for e in extra:
            header += [f"edge{e}_pred_cum", f"edge{e}_truth_cum", f"edge{e}_count_error_pct"]
        w.writerow(header)
        for i, m in enumerate(self.minutes):
            row = [m, self.pred_cum[i], self.truth_cum[i], self.count_error_pct[i], self.accuracy_pct[i],
                   self.pred_oee[i], self.truth_oee[i], self.oee_error[i]]
            for e in extra:
                ee = self.edges[e]
                row += [ee.pred_cum[i], ee.truth_cum[i], ee.count_error_pct[i]]
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
        return buf.getvalue()


def count_error_pct(pred_cum: Sequence[int], truth_cum: Sequence[int]) -> List[float]:
    """``100 * |pred - truth| / max(truth, 1)`` per minute."""
    return [100.0 * abs(p - t) / max(t, 1) for p, t in zip(pred_cum, truth_cum)]


def match_frame(pred_boxes: np.ndarray, truth_boxes: np.ndarray, threshold: float = MATCH_IOU) -> int:
    """Number of one-to-one matches with IoU >= ``threshold`` (optimal assignment)."""
    if len(pred_boxes) == 0 or len(truth_boxes) == 0:
        return 0
    return len(assign_max_iou(iou_matrix(pred_boxes, truth_boxes), threshold))


def frame_accuracy(pred_boxes: np.ndarray, truth_boxes: np.ndarray) -> float:
    """Percent of truth boxes matched; an empty frame scores 100 only if nothing was predicted."""
    if len(truth_boxes) == 0:
        return 100.0 if len(pred_boxes) == 0 else 0.0
    return 100.0 * match_frame(pred_boxes, truth_boxes) / len(truth_boxes)


def _running(t: int, stops: Sequence[Tuple[int, int]]) -> bool:
    return not any(a <= t < b for a, b in stops)


def _snapshot_index(snapshots) -> Dict[Tuple[int, int], List]:
    idx: Dict[Tuple[int, int], List] = defaultdict(list)
    for cam, snaps in snapshots.items():
        for s in snaps:
            idx[(s.camera, s.time)].append(s)
    return idx


def accuracy_by_minute(
    snapshots: Mapping[int, Sequence],
    frame_truth: Sequence[FrameTruth],
    camera_per_minute: Sequence[Optional[int]],
    stops: Sequence[Tuple[int, int]],
    n_minutes: int,
) -> List[Optional[float]]:
    """Mean per-frame accuracy of the given camera per minute; None when the line never ran."""
    idx = _snapshot_index(snapshots)
    sums = [0.0] * n_minutes
    counts = [0] * n_minutes
    for f in frame_truth:
        m = f.time // MS_PER_MINUTE
        if not 0 <= m < n_minutes or camera_per_minute[m] != f.camera or not _running(f.time, stops):
            continue
        preds = idx.get((f.camera, f.time), [])
        pb = np.array([s.bbox.as_tuple() for s in preds], dtype=float).reshape(-1, 4)
        tb = np.array([b.as_tuple() for b in f.boxes], dtype=float).reshape(-1, 4)
        sums[m] += frame_accuracy(pb, tb)
        counts[m] += 1
    return [s / c if c else None for s, c in zip(sums, counts)]


def identity_switches(snapshots: Mapping[int, Sequence], frame_truth: Sequence[FrameTruth]) -> int:
    """Times a true piece's matched track id changes between its matched frames."""
    idx = _snapshot_index(snapshots)
    last: Dict[Tuple[int, int], int] = {}
    switches = 0
    for f in sorted(frame_truth, key=lambda f: (f.camera, f.time)):
        preds = idx.get((f.camera, f.time), [])
        if not preds or not f.boxes:
            continue
        pb = np.array([s.bbox.as_tuple() for s in preds], dtype=float)
        tb = np.array([b.as_tuple() for b in f.boxes], dtype=float)
        for p, t in assign_max_iou(iou_matrix(pb, tb), MATCH_IOU):
            key = (f.camera, f.piece_ids[t] if f.piece_ids else t)
            tid = preds[p].track_id
            if key in last and last[key] != tid:
                switches += 1
            last[key] = tid
    return switches


def _truth_cumulative(ledger: GroundTruthLedger, edge_id: int, duration_ms: int) -> List[int]:
    times = [t for t, _ in ledger.reference_passes.get(edge_id, [])]
    return EdgeCountSeries.from_times(edge_id, times, duration_ms).cumulative


def evaluate(report, ledger: GroundTruthLedger, per_frame: bool = True) -> EvalSeries:
    """Per-minute count, accuracy and OEE errors of ``report`` against ``ledger``.

    Raises :class:`ValidationError` when the two sessions differ in length by
    more than a minute; otherwise the common minutes are compared.
    """
    if ledger.duration_ms is None:
        raise ValidationError("duration_ms: ledger has no session duration")
    if abs(report.duration_ms - ledger.duration_ms) > MS_PER_MINUTE:
        raise ValidationError(
            f"session mismatch: report covers {report.duration_ms} ms, ledger {ledger.duration_ms} ms"
        )
    truth = ledger_kpis(ledger, report.tau_ideal, report.total_edge)
    n = min(len(report.minutes), len(truth.minutes))
    minutes = list(range(n))

    edges: Dict[int, EdgeError] = {}
    for eid, col in sorted(report.edges.items()):
        if eid not in ledger.reference_passes and eid != report.total_edge:
            continue
        pred = list(col["cumulative"][:n])
        tru = _truth_cumulative(ledger, eid, ledger.duration_ms)[:n]
        edges[eid] = EdgeError(eid, pred, tru, count_error_pct(pred, tru))
    head = edges[report.total_edge]

    pred_oee = [report.minutes[m]["oee"] for m in minutes]
    truth_oee = [truth.minutes[m].oee for m in minutes]
    oee_err = [None if p is None or t is None else abs(p - t) for p, t in zip(pred_oee, truth_oee)]

    reason = None
    accuracy: List[Optional[float]] = [None] * n
    if not per_frame:
        reason = "not requested"
    elif ledger.per_frame_truth is None:
        reason = NO_FRAME_TRUTH
    elif report.snapshots is None:
        reason = NO_TRACK_DUMP
    else:
        cams = list(report.edges[report.total_edge]["active_camera"][:n])
        accuracy = accuracy_by_minute(report.snapshots, ledger.per_frame_truth, cams, ledger.stop_intervals, n)

    return EvalSeries(
        minutes=minutes,
        pred_cum=head.pred_cum,
        truth_cum=head.truth_cum,
        count_error_pct=head.count_error_pct,
        accuracy_pct=accuracy,
        pred_oee=pred_oee,
        truth_oee=truth_oee,
        oee_error=oee_err,
        edges=edges,
        accuracy_reason=reason,
        pred_session_oee=report.session.get("oee"),
        truth_session_oee=truth.session.oee,
    )
