"""Independent brute-force matching oracle and empirical bound checkers.

``brute_force_solve`` re-solves the constrained matching problem by exhaustive
recursion with none of the pruning or candidate machinery of the production
solver, so the two implementations can only agree if both are right.  On top
of it sit the empirical checkers: proposal-cover verification (does some
feasible selection reconstruct the ground truth to within epsilon) and the
Case-2 upper-bound assertion that a rejected image's predictions cannot be
secretly close to the ground truth.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import DimensionMismatch, InfeasibleConstraints, PreconditionUnmet, TooLarge
from .masks import BinaryMask
from .matching import (
    AnnotationMap,
    Assignment,
    CaseLabel,
    MatchConstraints,
    build_annotation,
    classify_case,
    solve_matching,
)
from .metrics import Metric, binary_overlap, overlap_score, soft_iou
from .probs import ProbStack

if TYPE_CHECKING:  # pragma: no cover
    from .synth import SyntheticInstance

# Exhaustive search is exponential in the proposal count; refuse beyond this.
BRUTE_FORCE_MAX_PROPOSALS = 16

# Slack on the Case-2 upper bound; the underlying triangle inequality is exact,
# this only absorbs float summation noise.
BOUND_SLACK = 1e-9


def brute_force_solve(
    proposals: Sequence[BinaryMask],
    probs: ProbStack,
    cons: MatchConstraints,
    metric: Metric = Metric.SOFT_IOU,
) -> Assignment:
    """Exhaustively enumerate every feasible matching and return the best.

    Recurses class by class over all index subsets of the still-unassigned
    proposals whose sizes satisfy the RoI bounds, with no score-based pruning.
    Ties resolve to the lexicographically smallest per-class index tuples,
    class 0 first, matching the production solver's tie-break.
    """
    proposals = list(proposals)
    k = len(proposals)
    if k > BRUTE_FORCE_MAX_PROPOSALS:
        raise TooLarge(
            f"brute force is capped at {BRUTE_FORCE_MAX_PROPOSALS} proposals, got {k}"
        )
    if probs.classes != cons.classes:
        raise DimensionMismatch(
            f"prob stack has {probs.classes} classes, constraints expect {cons.classes}"
        )
    for i, p in enumerate(proposals):
        if p.shape != probs.shape:
            raise DimensionMismatch(
                f"proposal {i} has shape {p.shape}, prob stack is {probs.shape}"
            )
    if sum(cons.v_lower) > k:
        raise InfeasibleConstraints(
            f"lower bounds require {sum(cons.v_lower)} distinct proposals but only {k} exist"
        )

    nfg = cons.foreground_classes
    bits = [p.bits for p in proposals]
    empty = np.zeros(probs.shape, dtype=bool)
    score_cache: dict[tuple[int, tuple[int, ...]], float] = {}

    def subset_score(c: int, subset: tuple[int, ...]) -> float:
        key = (c, subset)
        cached = score_cache.get(key)
        if cached is None:
            union = np.logical_or.reduce([bits[i] for i in subset]) if subset else empty
            cached = overlap_score(probs.class_map(c), BinaryMask(union), metric)
            score_cache[key] = cached
        return cached

    need_after = [0] * (nfg + 1)
    for c in range(nfg - 1, -1, -1):
        need_after[c] = cons.v_lower[c] + need_after[c + 1]

    best_total = -float("inf")
    best_key: tuple[tuple[int, ...], ...] | None = None
    best_scores: tuple[float, ...] = ()
    chosen: list[tuple[int, ...]] = [()] * nfg
    scores: list[float] = [0.0] * nfg

    def recurse(c: int, available: tuple[int, ...], acc: float) -> None:
        nonlocal best_total, best_key, best_scores
        if c == nfg:
            if acc > best_total:
                best_total, best_key, best_scores = acc, tuple(chosen), tuple(scores)
            elif acc == best_total:
                key = tuple(chosen)
                if best_key is None or key < best_key:
                    best_key, best_scores = key, tuple(scores)
            return
        hi = min(cons.v_upper[c], len(available) - need_after[c + 1])
        for t in range(cons.v_lower[c], hi + 1):
            for subset in itertools.combinations(available, t):
                chosen[c] = subset
                scores[c] = subset_score(c, subset)
                taken = set(subset)
                rest = tuple(i for i in available if i not in taken)
                recurse(c + 1, rest, acc + scores[c])
        chosen[c] = ()
        scores[c] = 0.0

    recurse(0, tuple(range(k)), 0.0)
    assert best_key is not None  # feasibility was checked upfront
    return Assignment(selections=best_key, per_class_iou=best_scores, exact=True)


@dataclass(frozen=True)
class CoverReport:
    """Result of checking whether proposals can reconstruct the ground truth.

    ``best_cover`` is the per-class selection maximizing summed IoU against the
    GT maps under the given constraints; ``holds`` means every class reaches
    1 - epsilon.
    """

    holds: bool
    best_cover: tuple[tuple[int, ...], ...]
    cover_iou: tuple[float, ...]
    epsilon: float


def check_cover(
    proposals: Sequence[BinaryMask],
    gt: AnnotationMap,
    cons: MatchConstraints,
    epsilon: float,
) -> CoverReport:
    """Does a feasible selection union to within epsilon of every GT class?

    Runs the optimal matcher with the GT class maps standing in for the
    probability stack (valid: GT is a 0/1 stack, and soft IoU on 0/1 inputs is
    plain IoU).  The check is constructive; when it holds, ``best_cover`` is a
    concrete feasible witness.
    """
    if gt.classes != cons.classes:
        raise DimensionMismatch(
            f"ground truth has {gt.classes} classes, constraints expect {cons.classes}"
        )
    assignment = solve_matching(proposals, gt.to_prob_stack(), cons)
    holds = all(iou >= 1.0 - epsilon for iou in assignment.per_class_iou)
    return CoverReport(
        holds=holds,
        best_cover=assignment.selections,
        cover_iou=assignment.per_class_iou,
        epsilon=float(epsilon),
    )


@dataclass(frozen=True)
class BoundReport:
    """Case-2 upper-bound check for one instance.

    ``violated`` can only be true for a Case-2 instance whose ground truth is
    coverable: then 1 - soft_iou being a metric forces
    soft_iou(gt_c, p_c) <= beta_star + epsilon for every foreground class, and
    any measured excess beyond float slack is an implementation bug.
    """

    case: CaseLabel
    beta: float
    iou_gt_pred: tuple[float, ...]
    bound: float
    violated: bool
    violating_classes: tuple[int, ...] = ()


def check_rejection_bound(inst: "SyntheticInstance", cons: MatchConstraints) -> BoundReport:
    """Assert the rejected-image bound on one synthetic instance.

    Preconditions: the instance's proposals must cover its ground truth to
    within ``inst.epsilon_target`` under ``cons`` (the bound's premise).  When
    the cover exists only under relaxed RoI bounds, that is reported as a
    distinct precondition failure rather than a bound violation.
    """
    epsilon = inst.epsilon_target
    cover = check_cover(inst.proposals, inst.gt, cons, epsilon)
    if not cover.holds:
        k = len(inst.proposals)
        relaxed = MatchConstraints(
            classes=cons.classes,
            v_lower=(0,) * cons.foreground_classes,
            v_upper=(k,) * cons.foreground_classes,
            beta_star=cons.beta_star,
            exact_budget=cons.exact_budget,
        )
        unconstrained = check_cover(inst.proposals, inst.gt, relaxed, epsilon)
        if unconstrained.holds:
            raise PreconditionUnmet(
                "a proposal cover within epsilon exists but is infeasible under the "
                f"RoI bounds (constrained cover IoU {cover.cover_iou})"
            )
        raise PreconditionUnmet(
            "no proposal subset covers the ground truth to within "
            f"epsilon={epsilon} (best cover IoU {unconstrained.cover_iou})"
        )

    assignment = solve_matching(inst.proposals, inst.probs, cons)
    case = classify_case(assignment, cons)
    iou_gt_pred = tuple(
        soft_iou(inst.probs.class_map(c), inst.gt.class_mask(c))
        for c in range(cons.foreground_classes)
    )
    bound = cons.beta_star + epsilon
    violating = tuple(
        c
        for c, iou in enumerate(iou_gt_pred)
        if case is CaseLabel.CASE2 and iou > bound + BOUND_SLACK
    )
    return BoundReport(
        case=case,
        beta=assignment.beta,
        iou_gt_pred=iou_gt_pred,
        bound=bound,
        violated=bool(violating),
        violating_classes=violating,
    )


@dataclass(frozen=True)
class CoverageResult:
    """Per-class Dice of the annotation built by matching proposals to GT."""

    per_class_dice: tuple[float, ...]
    mean_dice: float
    assignment: Assignment
    annotation: AnnotationMap


def oracle_coverage(
    proposals: Sequence[BinaryMask],
    gt: AnnotationMap,
    cons: MatchConstraints,
) -> CoverageResult:
    """Upper-bound the pipeline: match proposals directly against ground truth.

    The resulting Dice per class is the best any model-guided matching could
    hope for with these proposals, which is what makes it a coverage statistic
    for the proposal generator.
    """
    assignment = solve_matching(proposals, gt.to_prob_stack(), cons)
    annotation = build_annotation(proposals, assignment, gt.shape, image_id=gt.image_id)
    dice = tuple(
        binary_overlap(annotation.class_mask(c), gt.class_mask(c), Metric.DICE)
        for c in range(gt.foreground_classes)
    )
    return CoverageResult(
        per_class_dice=dice,
        mean_dice=float(sum(dice) / len(dice)),
        assignment=assignment,
        annotation=annotation,
    )
