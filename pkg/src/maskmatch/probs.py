"""Per-class probability stacks and their validation.

A stack holds one [0,1] float32 raster per class; the last channel is always
the background class.  Stacks are immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch

# Allowed drift of per-pixel cross-class sums when a stack claims to be normalized.
NORMALIZED_SUM_TOL = 1e-3


class ProbStack:
    """C probability rasters (channel-major), background as the last channel."""

    __slots__ = ("maps", "normalized")

    def __init__(self, maps, normalized: bool = False) -> None:
        arr = np.ascontiguousarray(maps, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"prob stack must be 3-D (C,h,w), got shape {arr.shape}")
        if arr.shape[0] < 2:
            raise ValueError(f"need >= 2 classes (incl. background), got {arr.shape[0]}")
        if arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ValueError(f"raster dimensions must be >= 1, got {arr.shape[1:]}")
        arr.flags.writeable = False
        self.maps = arr
        self.normalized = bool(normalized)

    @property
    def classes(self) -> int:
        """Total class count, background included."""
        return self.maps.shape[0]

    @property
    def foreground_classes(self) -> int:
        return self.maps.shape[0] - 1

    @property
    def height(self) -> int:
        return self.maps.shape[1]

    @property
    def width(self) -> int:
        return self.maps.shape[2]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def class_map(self, c: int) -> np.ndarray:
        """Raster for class ``c`` (0-based; the last index is background)."""
        return self.maps[c]

    def argmax_labels(self) -> np.ndarray:
        """Per-pixel most likely class index (ties go to the lower index)."""
        return self.maps.argmax(axis=0)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProbStack):
            return NotImplemented
        return (
            self.normalized == other.normalized
            and self.maps.shape == other.maps.shape
            and bool(np.array_equal(self.maps, other.maps))
        )

    def __hash__(self) -> int:
        return hash((self.maps.shape, self.normalized, self.maps.tobytes()))

    def __repr__(self) -> str:
        return (
            f"ProbStack(classes={self.classes}, {self.height}x{self.width}, "
            f"normalized={self.normalized})"
        )


@dataclass(frozen=True)
class StackViolation:
    kind: str  # "range" or "sum"
    pixel: tuple[int, int]
    class_index: int | None
    value: float


@dataclass(frozen=True)
class StackReport:
    ok: bool
    total_violations: int
    first: tuple[StackViolation, ...] = field(default_factory=tuple)

    def describe(self) -> str:
        if self.ok:
            return "ok"
        lines = [f"{self.total_violations} violation(s); first {len(self.first)}:"]
        for v in self.first:
            where = f"pixel {v.pixel}"
            if v.class_index is not None:
                where += f" class {v.class_index}"
            lines.append(f"  {v.kind} at {where}: {v.value!r}")
        return "\n".join(lines)


def validate_prob_stack(stack: ProbStack, max_listed: int = 10) -> StackReport:
    """Check value ranges (and per-pixel sums when the stack claims normalization).

    Never raises; returns a report listing at most ``max_listed`` offending
    pixels.  Sums are only checked when ``stack.normalized`` is set.
    """
    maps = stack.maps
    bad = ~((maps >= 0.0) & (maps <= 1.0))  # catches NaN too
    violations: list[StackViolation] = []
    total = int(bad.sum())
    if total:
        cs, rs, ws = np.nonzero(bad)
        for c, r, w in zip(cs[:max_listed], rs[:max_listed], ws[:max_listed]):
            violations.append(
                StackViolation("range", (int(r), int(w)), int(c), float(maps[c, r, w]))
            )
    if stack.normalized:
        sums = maps.sum(axis=0, dtype=np.float64)
        bad_sum = ~(np.abs(sums - 1.0) <= NORMALIZED_SUM_TOL)
        n_bad = int(bad_sum.sum())
        total += n_bad
        if n_bad and len(violations) < max_listed:
            rs, ws = np.nonzero(bad_sum)
            room = max_listed - len(violations)
            for r, w in zip(rs[:room], ws[:room]):
                violations.append(
                    StackViolation("sum", (int(r), int(w)), None, float(sums[r, w]))
                )
    return StackReport(ok=total == 0, total_violations=total, first=tuple(violations))


def require_same_dims(stack: ProbStack, shape: tuple[int, int]) -> None:
    if stack.shape != tuple(shape):
        raise DimensionMismatch(f"prob stack is {stack.shape}, expected {tuple(shape)}")
