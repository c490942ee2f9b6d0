"""Shared value types and 2-D geometry.

Image coordinates follow the usual raster convention: origin at the top-left
corner, x grows to the right, y grows downward. Every camera has its own
independent pixel frame.

Times are integer milliseconds since session start.
"""

from __future__ import annotations

import gc
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional, Tuple

from ._validation import ValidationError, check_finite, check_probability

Timestamp = int
Point = Tuple[float, float]

MS_PER_MINUTE = 60_000


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        for name in ("x_min", "y_min", "x_max", "y_max"):
            check_finite(getattr(self, name), name)
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(
                f"bbox: degenerate box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @classmethod
    def from_cxcywh(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    @classmethod
    def _unchecked(cls, x_min: float, y_min: float, x_max: float, y_max: float) -> "BoundingBox":
        # for producers that validated their values in bulk
        obj = object.__new__(cls)
        obj.__dict__.update(x_min=x_min, y_min=y_min, x_max=x_max, y_max=y_max)
        return obj


@dataclass(frozen=True)
class CameraId:
    id: int

    def __post_init__(self):
        if isinstance(self.id, bool) or not isinstance(self.id, int) or self.id < 1:
            raise ValidationError(f"cam: camera id must be an integer >= 1, got {self.id!r}")

    def __int__(self) -> int:
        return self.id


@dataclass(frozen=True)
class Detection:
    time: Timestamp
    camera: int
    bbox: BoundingBox
    confidence: float
    class_label: str = "box"

    def __post_init__(self):
        if self.time < 0:
            raise ValidationError(f"t_ms: negative timestamp {self.time}")
        CameraId(self.camera)
        check_probability(self.confidence, "conf")

    @classmethod
    def _unchecked(cls, time: Timestamp, camera: int, bbox: BoundingBox, confidence: float,
                   class_label: str = "box") -> "Detection":
        obj = object.__new__(cls)
        obj.__dict__.update(time=time, camera=camera, bbox=bbox, confidence=confidence, class_label=class_label)
        return obj


@dataclass(frozen=True)
class LineSegment2D:
    a: Point
    b: Point

    def __post_init__(self):
        for p in (self.a, self.b):
            check_finite(p[0], "wire")
            check_finite(p[1], "wire")
        if tuple(self.a) == tuple(self.b):
            raise ValidationError("wire: endpoints must differ")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two axis-aligned boxes."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def centroid(b: BoundingBox) -> Point:
    return ((b.x_min + b.x_max) / 2.0, (b.y_min + b.y_max) / 2.0)


def _cross(o: Point, p: Point, q: Point) -> float:
    return (p[0] - o[0]) * (q[1] - o[1]) - (p[1] - o[1]) * (q[0] - o[0])


def crossing_fraction(p1: Point, p2: Point, wire: LineSegment2D) -> Optional[Tuple[int, float]]:
    """Proper-crossing test returning ``(sign, u)``.

    ``u`` in (0, 1) is the position of the intersection along ``p1 -> p2``.
    Touching an endpoint or collinear overlap is not a crossing.
    """
    if p1[0] == p2[0] and p1[1] == p2[1]:
        return None
    a, b = wire.a, wire.b
    d1 = _cross(a, b, p1)
    d2 = _cross(a, b, p2)
    d3 = _cross(p1, p2, a)
    d4 = _cross(p1, p2, b)
    if d1 * d2 < 0.0 and d3 * d4 < 0.0:
        return (1 if d2 > 0.0 else -1), d1 / (d1 - d2)
    return None


def segments_intersect(p1: Point, p2: Point, wire: LineSegment2D) -> Optional[int]:
    """Signed side change when the step ``p1 -> p2`` properly crosses ``wire``.

    The sign is the orientation of ``p2`` with respect to the directed wire
    ``a -> b``: +1 when the cross product ``(b - a) x (p2 - a)`` is positive,
    -1 otherwise. Returns None when there is no proper crossing.
    """
    hit = crossing_fraction(p1, p2, wire)
    return None if hit is None else hit[0]


def ceil_ms(t_ms: float) -> Timestamp:
    """Integer millisecond at or after ``t_ms``, tolerant to float round-off."""
    return int(math.ceil(t_ms - 1e-6))


@contextmanager
def gc_paused():
    """Suspend cyclic garbage collection while building many small objects."""
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


def minute_of(t: Timestamp) -> int:
    return t // MS_PER_MINUTE
