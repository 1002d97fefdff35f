"""Seeded synthetic instances and datasets for exercising the pipeline.

Ground truth is a set of non-overlapping random rectangles and ellipses per
foreground class.  Proposals are axis-split fragments of those blobs with
per-pixel boundary flip noise, plus background distractors, which mimics how
class-agnostic proposal generators shatter and approximate real regions.
Probability stacks are the one-hot ground truth blended toward uniform and
blurred as ``fidelity`` falls from 1 to 0.

Every generated value derives from a single integer seed through
numpy's SeedSequence (a documented splitmix-style entropy hash), with
spawn keys for attempts and per-image streams, so regeneration is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator, Sequence

import numpy as np
from scipy.ndimage import binary_dilation, binary_erosion, gaussian_filter

from .errors import GenerationFailed
from .masks import BinaryMask, clip_union
from .matching import AnnotationMap
from .metrics import Metric, binary_overlap
from .probs import ProbStack

# Blobs keep this many pixels of clearance so fragments of different blobs
# never merge under 1-pixel boundary noise.
_BLOB_MARGIN = 2

# Gaussian blur reaches this sigma (in pixels) at fidelity 0.
_SMOOTH_BASE = 1.5

_PLACEMENT_TRIES = 50


@dataclass(frozen=True)
class SynthParams:
    """Knobs for one synthetic matching instance."""

    dims: tuple[int, int] = (32, 32)
    classes: int = 2
    blobs_per_class: tuple[int, int] = (1, 2)
    fragments_per_blob: tuple[int, int] = (1, 3)
    distractors: int = 2
    noise_rate: float = 0.02
    fidelity: float = 1.0
    epsilon_target: float = 0.02
    max_attempts: int = 100

    def __post_init__(self) -> None:
        h, w = self.dims
        if h < 8 or w < 8:
            raise ValueError(f"dims must be at least 8x8, got {self.dims}")
        if self.classes < 2:
            raise ValueError(f"need >= 2 classes, got {self.classes}")
        for name, (lo, hi) in (
            ("blobs_per_class", self.blobs_per_class),
            ("fragments_per_blob", self.fragments_per_blob),
        ):
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} range must satisfy 1 <= lo <= hi, got ({lo}, {hi})")
        if self.distractors < 0:
            raise ValueError("distractors must be >= 0")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError(f"noise_rate must be in [0,1], got {self.noise_rate}")
        if not 0.0 <= self.fidelity <= 1.0:
            raise ValueError(f"fidelity must be in [0,1], got {self.fidelity}")
        if not 0.0 < self.epsilon_target < 1.0:
            raise ValueError(f"epsilon_target must be in (0,1), got {self.epsilon_target}")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass(frozen=True)
class ProposalOrigin:
    """Where one proposal came from: a GT fragment or a pure distractor."""

    kind: str  # "fragment" or "distractor"
    class_index: int | None = None
    blob: int | None = None


@dataclass(frozen=True)
class SyntheticInstance:
    """One generated matching problem with known ground truth.

    The generator guarantees that for every foreground class the union of its
    fragment proposals reaches IoU >= 1 - epsilon_target against the GT map,
    so cover-based checkers have a feasible witness by construction.
    """

    dims: tuple[int, int]
    gt: AnnotationMap
    proposals: tuple[BinaryMask, ...]
    provenance: tuple[ProposalOrigin, ...]
    probs: ProbStack
    epsilon_target: float
    seed: int
    params: SynthParams

    def fragment_indices(self, class_index: int) -> tuple[int, ...]:
        """Indices of the proposals that are fragments of the given class."""
        return tuple(
            i
            for i, o in enumerate(self.provenance)
            if o.kind == "fragment" and o.class_index == class_index
        )

    def fragment_counts(self) -> tuple[int, ...]:
        return tuple(
            len(self.fragment_indices(c)) for c in range(self.gt.foreground_classes)
        )


def _blob_mask(rng: np.random.Generator, dims: tuple[int, int]) -> np.ndarray:
    """A random solid rectangle or ellipse placed fully inside the frame."""
    h, w = dims
    bh = int(rng.integers(max(3, h // 6), max(4, h // 3) + 1))
    bw = int(rng.integers(max(3, w // 6), max(4, w // 3) + 1))
    top = int(rng.integers(0, h - bh + 1))
    left = int(rng.integers(0, w - bw + 1))
    mask = np.zeros(dims, dtype=bool)
    if rng.integers(2) == 0:
        mask[top : top + bh, left : left + bw] = True
    else:
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = top + (bh - 1) / 2.0, left + (bw - 1) / 2.0
        ry, rx = bh / 2.0, bw / 2.0
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return mask


def _place_blobs(
    rng: np.random.Generator,
    dims: tuple[int, int],
    classes: int,
    blobs_range: tuple[int, int],
) -> list[list[np.ndarray]] | None:
    """Non-overlapping blobs per foreground class, or None when placement fails."""
    occupied = np.zeros(dims, dtype=bool)
    per_class: list[list[np.ndarray]] = []
    for _ in range(classes - 1):
        blobs: list[np.ndarray] = []
        n = int(rng.integers(blobs_range[0], blobs_range[1] + 1))
        for _ in range(n):
            placed = False
            for _ in range(_PLACEMENT_TRIES):
                cand = _blob_mask(rng, dims)
                if cand.any() and not (cand & occupied).any():
                    blobs.append(cand)
                    occupied |= binary_dilation(cand, iterations=_BLOB_MARGIN)
                    placed = True
                    break
            if not placed:
                return None
        per_class.append(blobs)
    return per_class


def _fragment_blob(
    rng: np.random.Generator, blob: np.ndarray, n_fragments: int
) -> list[np.ndarray]:
    """Split a blob into contiguous bands along a random axis."""
    axis = int(rng.integers(2))
    occ = np.unique(np.nonzero(blob)[axis])
    n = min(n_fragments, len(occ))
    if n == 1:
        return [blob.copy()]
    cuts = np.sort(rng.choice(occ[1:], size=n - 1, replace=False))
    coords = np.arange(blob.shape[axis])
    bounds = np.concatenate(([0], cuts, [blob.shape[axis]]))
    fragments = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        band = (coords >= lo) & (coords < hi)
        sel = band[:, None] if axis == 0 else band[None, :]
        fragments.append(blob & sel)
    return fragments


def _boundary_flip(
    rng: np.random.Generator, mask: np.ndarray, rate: float
) -> np.ndarray:
    """Flip pixels in the 1-pixel inner and outer boundary bands with prob rate."""
    if rate <= 0.0 or not mask.any():
        return mask
    outer = binary_dilation(mask) & ~mask
    inner = mask & ~binary_erosion(mask)
    flips = rng.random(mask.shape) < rate
    noisy = mask.copy()
    noisy[outer & flips] = True
    noisy[inner & flips] = False
    if not noisy.any():
        return mask
    return noisy


def _corrupt_stack(gt_stack: np.ndarray, fidelity: float) -> ProbStack:
    """Blend one-hot GT toward uniform and blur; fidelity 1 returns GT exactly."""
    c = gt_stack.shape[0]
    base = fidelity * gt_stack.astype(np.float64) + (1.0 - fidelity) / c
    sigma = _SMOOTH_BASE * (1.0 - fidelity)
    if sigma > 0.0:
        base = np.stack([gaussian_filter(ch, sigma=sigma, mode="nearest") for ch in base])
        base /= base.sum(axis=0, keepdims=True)
    return ProbStack(base.astype(np.float32), normalized=True)


def gen_synthetic_instance(seed: int, params: SynthParams | None = None) -> SyntheticInstance:
    """Generate one instance, retrying until the cover invariant holds.

    Raises GenerationFailed when ``max_attempts`` attempts cannot satisfy the
    per-class fragment-cover requirement (for example when noise_rate is too
    high for epsilon_target).
    """
    params = params or SynthParams()
    for attempt in range(params.max_attempts):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(attempt,)))
        inst = _gen_attempt(rng, seed, params)
        if inst is not None:
            return inst
    raise GenerationFailed(
        f"no instance satisfying cover IoU >= {1 - params.epsilon_target} per class "
        f"after {params.max_attempts} attempts (seed {seed}); "
        "noise_rate is likely too high for epsilon_target"
    )


def _gen_attempt(
    rng: np.random.Generator, seed: int, params: SynthParams
) -> SyntheticInstance | None:
    dims = params.dims
    per_class = _place_blobs(rng, dims, params.classes, params.blobs_per_class)
    if per_class is None:
        return None

    gt_maps = np.stack([np.logical_or.reduce(blobs) for blobs in per_class])
    gt = AnnotationMap(gt_maps)

    raw: list[tuple[np.ndarray, ProposalOrigin]] = []
    for c, blobs in enumerate(per_class):
        for b, blob in enumerate(blobs):
            n = int(rng.integers(params.fragments_per_blob[0], params.fragments_per_blob[1] + 1))
            for frag in _fragment_blob(rng, blob, n):
                noisy = _boundary_flip(rng, frag, params.noise_rate)
                raw.append((noisy, ProposalOrigin("fragment", class_index=c, blob=b)))
    gt_union = gt_maps.any(axis=0)
    for _ in range(params.distractors):
        for _ in range(_PLACEMENT_TRIES):
            cand = _blob_mask(rng, dims)
            if cand.any() and not (cand & gt_union).any():
                raw.append((cand, ProposalOrigin("distractor")))
                break
        else:
            return None

    order = rng.permutation(len(raw))
    proposals = tuple(BinaryMask(raw[i][0]) for i in order)
    provenance = tuple(raw[i][1] for i in order)

    # Cover invariant: each class's own fragments must reconstruct its GT map.
    for c in range(params.classes - 1):
        frag_idx = [
            i for i, o in enumerate(provenance) if o.kind == "fragment" and o.class_index == c
        ]
        union = clip_union(proposals, frag_idx, dims=dims)
        iou = binary_overlap(union, BinaryMask(gt_maps[c]), Metric.BINARY_IOU)
        if iou < 1.0 - params.epsilon_target:
            return None

    bg = ~gt_union
    gt_stack = np.concatenate([gt_maps.astype(np.float32), bg[None].astype(np.float32)])
    probs = _corrupt_stack(gt_stack, params.fidelity)

    return SyntheticInstance(
        dims=dims,
        gt=gt,
        proposals=proposals,
        provenance=provenance,
        probs=probs,
        epsilon_target=params.epsilon_target,
        seed=seed,
        params=params,
    )


# --- datasets for the training loop ---------------------------------------


@dataclass(frozen=True)
class DatasetParams:
    """Knobs for a loop dataset of feature images with drifting appearance.

    Each image carries per-pixel feature vectors: background pixels cluster at
    the origin, foreground pixels at ``feature_gap`` along a per-image angle
    theta.  Humans label images from a narrow theta span; the unlabeled and
    held-out pools draw from the full span, so a model trained only on the
    human pool degrades as theta drifts and can recover by absorbing admitted
    machine labels.  ``fidelity`` scales both feature noise and proposal
    boundary noise (1 = clean).
    """

    dims: tuple[int, int] = (64, 64)
    classes: int = 2
    n_human: int = 20
    n_unlabeled: int = 180
    n_held_out: int = 30
    feature_gap: float = 2.0
    feature_noise_max: float = 0.6
    span_labeled_deg: float = 25.0
    span_full_deg: float = 90.0
    blobs_per_class: tuple[int, int] = (1, 2)
    fragments_per_blob: tuple[int, int] = (1, 4)
    distractors: int = 2
    noise_rate_max: float = 0.04
    fidelity: float = 0.5
    epsilon_target: float = 0.02
    max_attempts: int = 100

    def __post_init__(self) -> None:
        if self.n_human < 1:
            raise ValueError("need at least one human-labeled image")
        if min(self.n_unlabeled, self.n_held_out) < 0:
            raise ValueError("pool sizes must be >= 0")
        if not 0.0 <= self.fidelity <= 1.0:
            raise ValueError(f"fidelity must be in [0,1], got {self.fidelity}")
        if not 0.0 < self.span_labeled_deg <= self.span_full_deg:
            raise ValueError("need 0 < span_labeled_deg <= span_full_deg")
        if self.feature_gap <= 0.0:
            raise ValueError("feature_gap must be positive")

    @property
    def feature_noise(self) -> float:
        return (1.0 - self.fidelity) * self.feature_noise_max

    @property
    def noise_rate(self) -> float:
        return (1.0 - self.fidelity) * self.noise_rate_max


@dataclass(frozen=True)
class SyntheticImage:
    """One dataset entry: features, ground truth, proposals, drift angle."""

    image_id: str
    features: np.ndarray  # (F, h, w) float32, read-only
    gt: AnnotationMap
    proposals: tuple[BinaryMask, ...]
    provenance: tuple[ProposalOrigin, ...]
    theta: float


@dataclass(frozen=True)
class SyntheticDataset:
    human: tuple[SyntheticImage, ...]
    unlabeled: tuple[SyntheticImage, ...]
    held_out: tuple[SyntheticImage, ...]
    params: DatasetParams
    seed: int

    def all_images(self) -> Iterator[SyntheticImage]:
        yield from self.human
        yield from self.unlabeled
        yield from self.held_out


def _class_centers(params: DatasetParams, theta: float) -> np.ndarray:
    """Feature-space centers, one row per class; background is the last row."""
    centers = np.zeros((params.classes, 2))
    for c in range(params.classes - 1):
        # Foreground classes sit evenly around the circle, rotated by theta.
        ang = theta + c * 2.0 * np.pi / (params.classes - 1)
        centers[c] = params.feature_gap * np.array([np.cos(ang), np.sin(ang)])
    return centers


def _gen_image(
    rng: np.random.Generator, image_id: str, theta: float, params: DatasetParams
) -> SyntheticImage | None:
    inst_params = SynthParams(
        dims=params.dims,
        classes=params.classes,
        blobs_per_class=params.blobs_per_class,
        fragments_per_blob=params.fragments_per_blob,
        distractors=params.distractors,
        noise_rate=params.noise_rate,
        fidelity=1.0,
        epsilon_target=params.epsilon_target,
        max_attempts=1,
    )
    inst = _gen_attempt(rng, seed=-1, params=inst_params)
    if inst is None:
        return None
    labels = inst.gt.label_map()
    centers = _class_centers(params, theta)
    feats = centers[labels].transpose(2, 0, 1)
    feats = feats + rng.normal(0.0, params.feature_noise, size=feats.shape)
    feats = np.ascontiguousarray(feats.astype(np.float32))
    feats.flags.writeable = False
    gt = AnnotationMap(inst.gt.class_maps, image_id=image_id)
    return SyntheticImage(
        image_id=image_id,
        features=feats,
        gt=gt,
        proposals=inst.proposals,
        provenance=inst.provenance,
        theta=float(theta),
    )


def gen_synthetic_dataset(seed: int, params: DatasetParams | None = None) -> SyntheticDataset:
    """Generate the three image pools, deterministically per seed."""
    params = params or DatasetParams()
    pools: list[tuple[SyntheticImage, ...]] = []
    specs = (
        ("human", params.n_human, params.span_labeled_deg),
        ("unlabeled", params.n_unlabeled, params.span_full_deg),
        ("heldout", params.n_held_out, params.span_full_deg),
    )
    for pool_code, (prefix, count, span_deg) in enumerate(specs):
        images = []
        for i in range(count):
            image_id = f"{prefix}-{i:04d}"
            made = None
            for attempt in range(params.max_attempts):
                rng = np.random.default_rng(
                    np.random.SeedSequence(seed, spawn_key=(pool_code, i, attempt))
                )
                theta = rng.uniform(0.0, np.deg2rad(span_deg))
                made = _gen_image(rng, image_id, theta, params)
                if made is not None:
                    break
            if made is None:
                raise GenerationFailed(
                    f"could not generate image {image_id} after {params.max_attempts} attempts"
                )
            images.append(made)
        pools.append(tuple(images))
    return SyntheticDataset(
        human=pools[0],
        unlabeled=pools[1],
        held_out=pools[2],
        params=params,
        seed=seed,
    )


def gen_fidelity_sweep(
    seed: int,
    fidelities: Sequence[float] = tuple(np.round(np.linspace(0.05, 1.0, 20), 3)),
    per_level: int = 10,
    params: SynthParams | None = None,
) -> list[SyntheticInstance]:
    """Instances spanning prediction quality, for selection-quality analysis."""
    base = params or SynthParams()
    out = []
    for fi, fid in enumerate(fidelities):
        level = replace(base, fidelity=float(fid))
        for j in range(per_level):
            out.append(gen_synthetic_instance(seed + 100_000 * fi + j, level))
    return out
