"""Binary masks, run-length encoding, and the clip-union operator.

Masks are immutable once constructed; every operation here is pure, so values
can be shared freely across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch, MalformedRle


class BinaryMask:
    """An immutable 2-D boolean raster (1 = foreground)."""

    __slots__ = ("bits",)

    def __init__(self, bits) -> None:
        arr = np.ascontiguousarray(bits, dtype=bool)
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"mask dimensions must be >= 1, got {arr.shape}")
        arr.flags.writeable = False
        self.bits = arr

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape  # type: ignore[return-value]

    def popcount(self) -> int:
        """Number of foreground pixels."""
        return int(self.bits.sum())

    @classmethod
    def zeros(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def ones(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.ones((height, width), dtype=bool))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.bits, other.bits))

    def __hash__(self) -> int:
        return hash((self.shape, self.bits.tobytes()))

    def __repr__(self) -> str:
        return f"BinaryMask({self.height}x{self.width}, popcount={self.popcount()})"


@dataclass(frozen=True)
class RleMask:
    """Column-major uncompressed run-length encoding of a BinaryMask.

    ``counts`` alternates runs of 0s and 1s in column-major pixel order; the
    first count is the number of leading zeros and may itself be zero.  This is
    the de-facto uncompressed COCO convention, so externally generated
    proposals convert losslessly.
    """

    size: tuple[int, int]  # (height, width)
    counts: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "size", (int(self.size[0]), int(self.size[1])))
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        validate_rle(self)


def validate_rle(rle: RleMask) -> None:
    """Raise MalformedRle unless the encoding satisfies its invariants."""
    h, w = rle.size
    if h < 1 or w < 1:
        raise MalformedRle(f"size must be >= 1x1, got {h}x{w}")
    total = 0
    for i, c in enumerate(rle.counts):
        if c < 0:
            raise MalformedRle(f"negative run length {c} at counts[{i}]")
        if c == 0 and i > 0 and rle.counts[i - 1] == 0:
            raise MalformedRle(f"adjacent zero run lengths at counts[{i - 1}..{i}]")
        total += c
    if total != h * w:
        raise MalformedRle(f"run lengths sum to {total}, expected {h * w} for size {h}x{w}")


def rle_encode(mask: BinaryMask) -> RleMask:
    """Encode a mask as canonical column-major runs (leading zero-run first)."""
    flat = mask.bits.ravel(order="F")
    # Boundaries between runs of unequal neighbours.
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(edges).tolist()
    if flat[0]:  # canonical form starts with the zero run, possibly empty
        counts.insert(0, 0)
    return RleMask(size=mask.shape, counts=tuple(counts))


def rle_decode(rle: RleMask) -> BinaryMask:
    """Exact inverse of rle_encode; raises MalformedRle on invalid input."""
    validate_rle(rle)  # RleMask construction validates, but accept duck-typed input
    h, w = rle.size
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for c in rle.counts:
        if value:
            flat[pos : pos + c] = True
        pos += c
        value = not value
    return BinaryMask(flat.reshape((h, w), order="F"))


def clip_union(
    proposals: Sequence[BinaryMask],
    selected: Iterable[int],
    dims: tuple[int, int] | None = None,
) -> BinaryMask:
    """Pixelwise OR of the selected proposals.

    Summing binary masks and clipping values above 1 back to 1 is exactly the
    union of their supports; repeated selections are therefore idempotent.  An
    empty selection yields the all-zero mask (``dims`` disambiguates the target
    shape when ``proposals`` is empty).
    """
    indices = list(selected)
    if proposals:
        shape = proposals[0].shape
        for i, p in enumerate(proposals):
            if p.shape != shape:
                raise DimensionMismatch(
                    f"proposal {i} has shape {p.shape}, expected {shape}"
                )
        if dims is not None and tuple(dims) != shape:
            raise DimensionMismatch(f"dims {tuple(dims)} != proposal shape {shape}")
    elif dims is None:
        raise DimensionMismatch("cannot infer dimensions from an empty proposal list")
    else:
        shape = (int(dims[0]), int(dims[1]))

    for i in indices:
        if not 0 <= i < len(proposals):
            raise IndexError(f"selected index {i} out of range for {len(proposals)} proposals")

    if not indices:
        return BinaryMask.zeros(*shape)
    acc = np.zeros(shape, dtype=bool)
    for i in indices:
        np.logical_or(acc, proposals[i].bits, out=acc)
    return BinaryMask(acc)
