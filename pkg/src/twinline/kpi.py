"""OEE stack: availability, performance, quality and their product.

Durations are carried as integer milliseconds so that
``t_operating + t_downtime == t_planned`` holds exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

from ._validation import ContractError, ValidationError
from .core import MS_PER_MINUTE

NO_OPERATING_TIME = "no operating time"
DATA_GAP = "data gap"


@dataclass(frozen=True)
class PieceCounts:
    q_good: int
    q_bad: int
    q_total: int
    imbalance: bool = False

    def __post_init__(self):
        if min(self.q_good, self.q_bad, self.q_total) < 0:
            raise ValidationError("q_total: counts must be >= 0")
        if self.q_good + self.q_bad != self.q_total:
            raise ValidationError("q_total: must equal q_good + q_bad")

    @classmethod
    def from_total_and_good(cls, q_total: int, q_good: int) -> "PieceCounts":
        """Counts from a pre-inspection total and a post-inspection good count.

        Pieces still in transit between the two counting points can make the
        good count exceed the total over a short window; the surplus is
        dropped and ``imbalance`` is set.
        """
        if q_good > q_total:
            return cls(q_total, 0, q_total, imbalance=True)
        return cls(q_good, q_total - q_good, q_total)

    @classmethod
    def from_total_and_bad(cls, q_total: int, q_bad: int) -> "PieceCounts":
        if q_bad > q_total:
            return cls(0, q_total, q_total, imbalance=True)
        return cls(q_total - q_bad, q_bad, q_total)


def piece_counts(edge_total, edge_good, window: Optional[Tuple[int, int]] = None) -> PieceCounts:
    """Counts over minute bins ``[start, end)`` of two edge series.

    ``edge_total`` counts every piece before inspection and ``edge_good``
    the pieces that passed it. Data-gap minutes contribute nothing.
    """
    lo, hi = window if window is not None else (0, len(edge_total.counts))
    total = sum(c or 0 for c in edge_total.counts[lo:hi])
    good = sum(c or 0 for c in edge_good.counts[lo:hi])
    return PieceCounts.from_total_and_good(total, good)


def availability_ratio(t_planned: float, t_downtime: float) -> float:
    if not t_planned > 0:
        raise ContractError(f"availability: planned time must be > 0, got {t_planned}")
    if t_downtime < 0 or t_downtime > t_planned:
        raise ContractError(
            f"availability: downtime {t_downtime} outside [0, planned time {t_planned}]"
        )
    return (t_planned - t_downtime) / t_planned


def performance_ratio(tau_ideal: float, q_total: int, t_operating: float) -> Optional[float]:
    """Ideal production time over operating time; None without operating time.

    Values above 1 are legitimate output (pieces arriving faster than the
    ideal cycle time) and are flagged by callers, not clipped.
    """
    if not tau_ideal > 0:
        raise ContractError(f"performance: ideal cycle time must be > 0, got {tau_ideal}")
    if t_operating <= 0:
        return None
    return tau_ideal * q_total / t_operating


def quality_ratio(counts: PieceCounts) -> float:
    if counts.q_total == 0:
        return 1.0
    return counts.q_good / counts.q_total


@dataclass(frozen=True)
class OeeProduct:
    oee: float
    performance_clamped: float
    oee_clamped: float


def oee(a: float, p: float, q: float) -> OeeProduct:
    pc = min(p, 1.0)
    return OeeProduct(a * p * q, pc, a * pc * q)


@dataclass(frozen=True)
class OeeBreakdown:
    """One window's OEE decomposition.

    ``performance`` and ``oee`` are None when they cannot be computed
    (``reason`` says why); with no operating time at all ``oee`` is 0.
    """

    availability: float
    performance: Optional[float]
    quality: Optional[float]
    oee: Optional[float]
    performance_clamped: Optional[float]
    t_planned_ms: int
    t_downtime_ms: int
    tau_ideal: float
    window: Tuple[int, int]
    counts: Optional[PieceCounts] = None
    reason: Optional[str] = None

    @property
    def t_operating_ms(self) -> int:
        return self.t_planned_ms - self.t_downtime_ms

    @property
    def t_planned(self) -> float:
        return self.t_planned_ms / 1000.0

    @property
    def t_downtime(self) -> float:
        return self.t_downtime_ms / 1000.0

    @property
    def t_operating(self) -> float:
        return self.t_operating_ms / 1000.0

    @property
    def performance_anomaly(self) -> bool:
        return self.performance is not None and self.performance > 1.0

    @property
    def quality_vacuous(self) -> bool:
        return self.counts is not None and self.counts.q_total == 0

    @property
    def oee_clamped(self) -> Optional[float]:
        if self.oee is None or self.performance_clamped is None:
            return self.oee
        return self.availability * self.performance_clamped * self.quality


def breakdown(
    t_planned_ms: int,
    t_downtime_ms: int,
    counts: Optional[PieceCounts],
    tau_ideal: float,
    window: Tuple[int, int],
) -> OeeBreakdown:
    """Assemble A, P, Q and OEE for one window."""
    a = availability_ratio(t_planned_ms, t_downtime_ms)
    t_op = t_planned_ms - t_downtime_ms
    if counts is None:
        return OeeBreakdown(a, None, None, None, None, t_planned_ms, t_downtime_ms, tau_ideal, window,
                            None, DATA_GAP)
    q = quality_ratio(counts)
    p = performance_ratio(tau_ideal, counts.q_total, t_op / 1000.0)
    if p is None:
        return OeeBreakdown(a, None, q, 0.0, None, t_planned_ms, t_downtime_ms, tau_ideal, window,
                            counts, NO_OPERATING_TIME)
    prod = oee(a, p, q)
    return OeeBreakdown(a, p, q, prod.oee, prod.performance_clamped, t_planned_ms, t_downtime_ms,
                        tau_ideal, window, counts)


def rolling_mean(series: Sequence[Optional[float]], k: int) -> List[Optional[float]]:
    """Centred ``k``-point mean; None entries are skipped, edges shrink the window."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"rolling_mean: k must be odd and >= 1, got {k}")
    if k == 1:
        return list(series)
    h = k // 2
    out: List[Optional[float]] = []
    n = len(series)
    for i in range(n):
        vals = [v for v in series[max(0, i - h):min(n, i + h + 1)] if v is not None]
        out.append(sum(vals) / len(vals) if vals else None)
    return out


def _overlap(intervals: Iterable[Tuple[int, int]], lo: int, hi: int) -> int:
    return sum(max(0, min(b, hi) - max(a, lo)) for a, b in intervals)


@dataclass
class KpiSeries:
    minutes: List[OeeBreakdown]
    session: OeeBreakdown
    flags: dict = field(default_factory=dict)

    def column(self, name: str) -> List[Optional[float]]:
        return [getattr(b, name) for b in self.minutes]


def compute_kpis(
    minute_counts: Sequence[Optional[PieceCounts]],
    downtime: Iterable[Tuple[int, int]],
    duration_ms: int,
    tau_ideal: float,
    t_planned_ms: Optional[int] = None,
    session_counts: Optional[PieceCounts] = None,
) -> KpiSeries:
    """Per-minute and session OEE breakdowns.

    ``minute_counts`` holds one entry per minute bin (None for a data gap);
    ``downtime`` is a list of ``(t_stop, t_start)`` ms intervals. The session
    breakdown uses session totals, not the mean of minute values; pass
    ``session_counts`` when those totals are not the sum of the minute counts.
    """
    downtime = list(downtime)
    minutes: List[OeeBreakdown] = []
    n = len(minute_counts)
    for m in range(n):
        lo = m * MS_PER_MINUTE
        hi = min(lo + MS_PER_MINUTE, duration_ms)
        minutes.append(
            breakdown(hi - lo, _overlap(downtime, lo, hi), minute_counts[m], tau_ideal, (m, m + 1))
        )
    planned = duration_ms if t_planned_ms is None else t_planned_ms
    total_down = min(_overlap(downtime, 0, duration_ms), planned)
    if session_counts is None:
        present = [c for c in minute_counts if c is not None]
        session_counts = PieceCounts(
            sum(c.q_good for c in present), sum(c.q_bad for c in present), sum(c.q_total for c in present),
            any(c.imbalance for c in present),
        )
    session = breakdown(planned, total_down, session_counts, tau_ideal, (0, n))
    flags = {
        "performance_anomaly": any(b.performance_anomaly for b in minutes) or session.performance_anomaly,
        "performance_anomaly_minutes": [m for m, b in enumerate(minutes) if b.performance_anomaly],
        "data_gap_minutes": [m for m, c in enumerate(minute_counts) if c is None],
        "imbalance_minutes": [m for m, c in enumerate(minute_counts) if c is not None and c.imbalance],
        "vacuous_quality_minutes": [m for m, b in enumerate(minutes) if b.quality_vacuous],
    }
    return KpiSeries(minutes, session, flags)


def counts_from_edges(edge_total, edge_good) -> List[Optional[PieceCounts]]:
    """Minute counts from the pre- and post-inspection edge series."""
    out: List[Optional[PieceCounts]] = []
    for t, g in zip(edge_total.counts, edge_good.counts):
        out.append(None if t is None or g is None else PieceCounts.from_total_and_good(t, g))
    return out


def ledger_kpis(ledger, tau_ideal: float, total_edge: int, t_planned_ms: Optional[int] = None) -> KpiSeries:
    """True KPIs from a ground-truth ledger.

    Totals are the pieces passing the pre-inspection counting point, bad
    pieces are the inspection removals, downtime is the ledger's stop list.
    """
    from .counting import EdgeCountSeries

    duration = ledger.duration_ms
    if duration is None:
        raise ValidationError("duration_ms: ledger has no session duration")
    totals = EdgeCountSeries.from_times(total_edge, [t for t, _ in ledger.reference_passes.get(total_edge, [])],
                                        duration)
    bad = EdgeCountSeries.from_times(-1, [t for t, _ in ledger.removals_at_qa], duration)
    counts = [PieceCounts.from_total_and_bad(t, b) for t, b in zip(totals.counts, bad.counts)]
    session = PieceCounts.from_total_and_bad(totals.total(), bad.total())
    return compute_kpis(counts, ledger.stop_intervals, duration, tau_ideal, t_planned_ms, session)
