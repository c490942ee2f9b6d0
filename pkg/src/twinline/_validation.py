"""Input validation helpers shared across modules."""

from __future__ import annotations

import math
from typing import Iterable, Sequence


class ValidationError(ValueError):
    """Raised when an input violates a documented invariant.

    The message starts with the offending field name.
    """


class ContractError(ValueError):
    """Raised when a caller breaks an operation precondition."""


class CalibrationError(RuntimeError):
    """Raised when automatic threshold calibration cannot proceed."""


def check_finite(value: float, name: str) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"{name}: expected a number, got {value!r}") from None
    if not math.isfinite(v):
        raise ValidationError(f"{name}: value must be finite, got {value!r}")
    return v


def check_probability(value: float, name: str) -> float:
    v = check_finite(value, name)
    if not 0.0 <= v <= 1.0:
        raise ValidationError(f"{name}: must lie in [0, 1], got {value!r}")
    return v


def check_positive(value: float, name: str) -> float:
    v = check_finite(value, name)
    if v <= 0.0:
        raise ValidationError(f"{name}: must be > 0, got {value!r}")
    return v


def check_non_negative(value: float, name: str) -> float:
    v = check_finite(value, name)
    if v < 0.0:
        raise ValidationError(f"{name}: must be >= 0, got {value!r}")
    return v


def check_time_sorted(times: Sequence[int], name: str) -> None:
    for i in range(1, len(times)):
        if times[i] < times[i - 1]:
            raise ValidationError(
                f"{name}: timestamps not monotone at index {i} ({times[i - 1]} > {times[i]})"
            )


def check_intervals(intervals: Iterable[tuple], name: str) -> None:
    """Intervals must each be non-empty, ordered and pairwise disjoint."""
    prev_end = None
    for i, (lo, hi) in enumerate(intervals):
        if not lo < hi:
            raise ValidationError(f"{name}: interval {i} has start >= end ({lo}, {hi})")
        if prev_end is not None and lo < prev_end:
            raise ValidationError(f"{name}: interval {i} overlaps or is out of order")
        prev_end = hi
