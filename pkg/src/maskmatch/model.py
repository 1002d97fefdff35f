"""Pluggable segmentation-model contract and the built-in reference model.

The training loop only needs two behaviors from a model: train on a mix of
human- and machine-labeled examples where machine examples carry weight
``lam``, and predict a normalized per-class probability stack from a feature
raster.  The reference implementation is a prototype classifier over per-pixel
feature vectors: cheap, exactly deterministic, and faithful to the weighting
semantics, which is all the loop's correctness arguments require.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence, runtime_checkable

import numpy as np

from .errors import DegenerateClass, DimensionMismatch, NoLabeledData
from .matching import AnnotationMap
from .metrics import Metric, binary_overlap
from .masks import BinaryMask
from .probs import ProbStack


@dataclass(frozen=True)
class LabeledExample:
    """A feature raster paired with a per-class annotation."""

    image_id: str
    features: np.ndarray  # (F, h, w) float32
    gt: AnnotationMap


@runtime_checkable
class TrainedModel(Protocol):
    def predict(self, features: np.ndarray) -> ProbStack: ...


@runtime_checkable
class ModelTrainer(Protocol):
    def train(
        self,
        human: Sequence[LabeledExample],
        machine: Sequence[LabeledExample],
        lam: float,
        seed: int,
    ) -> TrainedModel: ...


@dataclass(frozen=True)
class ReferenceModel:
    """Nearest-prototype classifier with a softmax over squared distances.

    p_c(x) is proportional to exp(-||f(x) - prototype_c||^2 / temperature),
    normalized across classes, so predictions always form a valid stack.
    """

    prototypes: np.ndarray  # (C, F) float64, background last
    temperature: float
    seed: int = 0

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.prototypes, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 2:
            raise ValueError(f"prototypes must be (C>=2, F), got {arr.shape}")
        if self.temperature <= 0.0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        arr.flags.writeable = False
        object.__setattr__(self, "prototypes", arr)

    @property
    def classes(self) -> int:
        return self.prototypes.shape[0]

    def predict(self, features: np.ndarray) -> ProbStack:
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 3 or feats.shape[0] != self.prototypes.shape[1]:
            raise DimensionMismatch(
                f"features must be ({self.prototypes.shape[1]}, h, w), got {feats.shape}"
            )
        diffs = feats[None] - self.prototypes[:, :, None, None]
        logits = -(diffs**2).sum(axis=1) / self.temperature
        logits -= logits.max(axis=0, keepdims=True)  # stabilize the softmax
        p = np.exp(logits)
        p /= p.sum(axis=0, keepdims=True)
        return ProbStack(p.astype(np.float32), normalized=True)


@dataclass(frozen=True)
class ReferenceTrainer:
    """Builds a ReferenceModel from weighted per-class feature means.

    Human pixels carry weight 1 and machine pixels weight ``lam``, mirroring
    how the machine-label term enters the training objective.  Training is a
    closed-form average, hence deterministic for any seed; the seed is stored
    on the model for provenance.
    """

    temperature: float = 0.4

    def train(
        self,
        human: Sequence[LabeledExample],
        machine: Sequence[LabeledExample] = (),
        lam: float = 1.0,
        seed: int = 0,
    ) -> ReferenceModel:
        examples = [(ex, 1.0) for ex in human] + [(ex, float(lam)) for ex in machine]
        if not examples:
            raise NoLabeledData("cannot train a model from zero labeled examples")
        classes = examples[0][0].gt.classes
        n_features = int(np.asarray(examples[0][0].features).shape[0])
        sums = np.zeros((classes, n_features), dtype=np.float64)
        weights = np.zeros(classes, dtype=np.float64)
        for ex, w in examples:
            if w == 0.0:
                continue
            if ex.gt.classes != classes:
                raise DimensionMismatch(
                    f"example {ex.image_id!r} has {ex.gt.classes} classes, expected {classes}"
                )
            feats = np.asarray(ex.features, dtype=np.float64)
            labels = ex.gt.label_map()
            for c in range(classes):
                sel = labels == c
                count = int(sel.sum())
                if count:
                    sums[c] += w * feats[:, sel].sum(axis=1)
                    weights[c] += w * count
        for c in range(classes):
            if weights[c] <= 0.0:
                raise DegenerateClass(f"class {c} has no labeled pixels with positive weight")
        prototypes = sums / weights[:, None]
        return ReferenceModel(prototypes=prototypes, temperature=self.temperature, seed=seed)


def predict_labels(model: TrainedModel, features: np.ndarray) -> np.ndarray:
    """Hard per-pixel class decisions from a model's probability stack."""
    return model.predict(features).argmax_labels()


def mean_dice(model: TrainedModel, examples: Iterable[LabeledExample]) -> float:
    """Mean over images of the mean foreground-class Dice of argmax predictions."""
    per_image = []
    for ex in examples:
        labels = predict_labels(model, ex.features)
        scores = [
            binary_overlap(BinaryMask(labels == c), ex.gt.class_mask(c), Metric.DICE)
            for c in range(ex.gt.foreground_classes)
        ]
        per_image.append(sum(scores) / len(scores))
    if not per_image:
        raise NoLabeledData("cannot evaluate on an empty example set")
    return float(sum(per_image) / len(per_image))
