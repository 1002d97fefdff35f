"""Overlap metrics between probability rasters and binary masks.

The soft IoU used throughout is the Ruzicka similarity sum(min)/sum(max).  On
0/1-valued inputs it reduces to the ordinary set IoU, and its complement
1 - soft_iou is a true metric (Steinhaus distance) on non-negative rasters,
which is what makes the empirical bound checker in the oracle module sound.
"""

from __future__ import annotations

import enum

import numpy as np

from .errors import DimensionMismatch
from .masks import BinaryMask

# Below this denominator both operands are treated as empty (float-noise guard).
EMPTY_DENOMINATOR = 1e-12

# Probability rasters compared under a binary metric are thresholded here.
BINARYIZE_THRESHOLD = 0.5


class Metric(enum.Enum):
    """Similarity flavor for mask/raster comparisons."""

    SOFT_IOU = "soft-iou"
    BINARY_IOU = "binary-iou"
    DICE = "dice"


def soft_iou(p: np.ndarray, mask: BinaryMask) -> float:
    """Ruzicka similarity sum(min)/sum(max) between a raster and a mask.

    Both-empty inputs score 1.0: an absent region predicted as absent is a
    perfect match, and this avoids 0/0.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.shape != mask.shape:
        raise DimensionMismatch(f"raster is {p.shape}, mask is {mask.shape}")
    m = mask.bits
    denom = float(np.maximum(p, m).sum())
    if denom < EMPTY_DENOMINATOR:
        return 1.0
    return float(np.minimum(p, m).sum()) / denom


def binary_overlap(a: BinaryMask, b: BinaryMask, metric: Metric = Metric.BINARY_IOU) -> float:
    """IoU or Dice between two binary masks (both-empty convention: 1.0)."""
    if a.shape != b.shape:
        raise DimensionMismatch(f"masks differ: {a.shape} vs {b.shape}")
    if metric is Metric.SOFT_IOU:  # identical to binary IoU on 0/1 inputs
        metric = Metric.BINARY_IOU
    inter = int(np.logical_and(a.bits, b.bits).sum())
    na, nb = a.popcount(), b.popcount()
    if metric is Metric.BINARY_IOU:
        union = na + nb - inter
        return 1.0 if union == 0 else inter / union
    if metric is Metric.DICE:
        total = na + nb
        return 1.0 if total == 0 else 2.0 * inter / total
    raise ValueError(f"unsupported metric {metric!r}")


def overlap_score(p: np.ndarray, mask: BinaryMask, metric: Metric = Metric.SOFT_IOU) -> float:
    """Score a probability raster against a mask under the chosen metric.

    SOFT_IOU compares the raster directly; the binary metrics threshold the
    raster at 0.5 first (the thresholded variant of the matching objective).
    """
    if metric is Metric.SOFT_IOU:
        return soft_iou(p, mask)
    p = np.asarray(p, dtype=np.float64)
    if p.shape != mask.shape:
        raise DimensionMismatch(f"raster is {p.shape}, mask is {mask.shape}")
    return binary_overlap(BinaryMask(p >= BINARYIZE_THRESHOLD), mask, metric)
