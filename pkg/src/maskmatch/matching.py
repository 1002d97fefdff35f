"""Constrained optimal matching of proposals against probability maps.

The objective maximizes, over per-class selections of proposal indices, the
sum of per-class overlap scores between each foreground class raster and the
clip-union of that class's selected proposals, subject to

  * index disjointness: a proposal belongs to at most one class, and
  * RoI-count bounds: v_lower[c] <= |selection_c| <= v_upper[c].

Because a selection is scored through the union of its masks, the objective is
a set function and not an assignment-problem weight sum, so the exact solver
enumerates per-class candidate subsets and searches over per-class choices
with depth-first branch-and-bound.  It refuses (falling back to the greedy
heuristic) when the number of candidate subsets exceeds ``exact_budget``.

All functions are pure; inputs and outputs are immutable.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, InfeasibleConstraints
from .masks import BinaryMask, clip_union
from .metrics import Metric, overlap_score
from .probs import ProbStack

# Branch-and-bound prune guard: never prune a branch whose bound is within this
# of the incumbent, so float-summation order cannot drop an exact tie.
_PRUNE_SLACK = 1e-12

# Local-search moves must beat the incumbent by this much to be applied.
_IMPROVE_EPS = 1e-12


@dataclass(frozen=True)
class MatchConstraints:
    """RoI-count bounds per foreground class plus acceptance configuration.

    ``v_lower``/``v_upper`` have one entry per foreground class (background,
    the last class, is never matched).  ``exact_budget`` caps how many
    candidate proposal subsets the exact solver may enumerate before it falls
    back to the greedy heuristic.
    """

    classes: int
    v_lower: tuple[int, ...]
    v_upper: tuple[int, ...]
    beta_star: float = 0.9
    exact_budget: int = 10**6

    def __post_init__(self) -> None:
        object.__setattr__(self, "v_lower", tuple(int(v) for v in self.v_lower))
        object.__setattr__(self, "v_upper", tuple(int(v) for v in self.v_upper))
        if self.classes < 2:
            raise ValueError(f"need >= 2 classes (incl. background), got {self.classes}")
        nfg = self.classes - 1
        if len(self.v_lower) != nfg or len(self.v_upper) != nfg:
            raise ValueError(
                f"bounds must have {nfg} entries, got "
                f"{len(self.v_lower)} lower / {len(self.v_upper)} upper"
            )
        for c, (lo, hi) in enumerate(zip(self.v_lower, self.v_upper)):
            if not 0 <= lo <= hi:
                raise ValueError(f"class {c}: need 0 <= v_lower <= v_upper, got [{lo}, {hi}]")
        if not 0.0 <= self.beta_star <= 1.0:
            raise ValueError(f"beta_star must be in [0,1], got {self.beta_star}")
        if self.exact_budget < 1:
            raise ValueError("exact_budget must be positive")

    @property
    def foreground_classes(self) -> int:
        return self.classes - 1


@dataclass(frozen=True)
class Assignment:
    """A feasible matching: per-class index selections and their scores.

    ``beta`` is the mean of the per-class overlap scores; ``exact`` records
    whether the producing solver certifies global optimality.
    """

    selections: tuple[tuple[int, ...], ...]
    per_class_iou: tuple[float, ...]
    exact: bool
    beta: float = field(init=False)
    objective: float = field(init=False)

    def __post_init__(self) -> None:
        sels = tuple(tuple(sorted(int(i) for i in s)) for s in self.selections)
        object.__setattr__(self, "selections", sels)
        object.__setattr__(self, "per_class_iou", tuple(float(x) for x in self.per_class_iou))
        if len(sels) != len(self.per_class_iou):
            raise ValueError("selections and per_class_iou must align per class")
        if not sels:
            raise ValueError("need at least one foreground class")
        seen: set[int] = set()
        for c, s in enumerate(sels):
            for i in s:
                if i in seen:
                    raise ValueError(f"proposal {i} assigned to more than one class (class {c})")
                seen.add(i)
        obj = 0.0
        for x in self.per_class_iou:
            obj += x
        object.__setattr__(self, "objective", obj)
        object.__setattr__(self, "beta", obj / len(self.per_class_iou))

    def tie_key(self) -> tuple[tuple[int, ...], ...]:
        """Ordering key used for deterministic tie-breaks (class 0 first)."""
        return self.selections

    def selected_indices(self) -> set[int]:
        return {i for s in self.selections for i in s}


class CaseLabel(enum.Enum):
    """Whether an image's optimal matching clears the acceptance threshold."""

    CASE1 = "case1"
    CASE2 = "case2"


class AnnotationMap:
    """Constructed machine annotation: one binary map per foreground class.

    The per-class maps are the raw clip-unions of the selected proposals and
    may overlap pixelwise across classes; ``label_map`` resolves overlaps to
    the lowest class index and ``conflict_pixels`` counts them.  Every pixel
    outside all foreground maps belongs to the background class (the last
    class index).
    """

    __slots__ = ("class_maps", "classes", "image_id", "assignment", "conflict_pixels")

    def __init__(
        self,
        class_maps,
        image_id: str | None = None,
        assignment: Assignment | None = None,
    ) -> None:
        arr = np.ascontiguousarray(class_maps, dtype=bool)
        if arr.ndim != 3 or arr.shape[0] < 1:
            raise ValueError(f"class_maps must be (C-1,h,w) with C-1 >= 1, got {arr.shape}")
        arr.flags.writeable = False
        self.class_maps = arr
        self.classes = arr.shape[0] + 1
        self.image_id = image_id
        self.assignment = assignment
        self.conflict_pixels = int((arr.sum(axis=0) > 1).sum())

    @classmethod
    def from_masks(
        cls,
        masks: Sequence[BinaryMask],
        image_id: str | None = None,
        assignment: Assignment | None = None,
    ) -> "AnnotationMap":
        return cls(np.stack([m.bits for m in masks]), image_id, assignment)

    @property
    def shape(self) -> tuple[int, int]:
        return self.class_maps.shape[1:]  # type: ignore[return-value]

    @property
    def foreground_classes(self) -> int:
        return self.classes - 1

    def class_mask(self, c: int) -> BinaryMask:
        return BinaryMask(self.class_maps[c])

    def foreground_union(self) -> BinaryMask:
        return BinaryMask(self.class_maps.any(axis=0))

    def label_map(self) -> np.ndarray:
        """Per-pixel class index; overlaps go to the lowest class, rest is background."""
        h, w = self.shape
        labels = np.full((h, w), self.classes - 1, dtype=np.int32)
        for c in range(self.foreground_classes - 1, -1, -1):
            labels[self.class_maps[c]] = c
        return labels

    def to_prob_stack(self) -> ProbStack:
        """The annotation as a 0/1 probability stack (background = 1 - union)."""
        fg = self.class_maps.astype(np.float32)
        bg = 1.0 - self.class_maps.any(axis=0).astype(np.float32)
        return ProbStack(np.concatenate([fg, bg[None]]), normalized=self.conflict_pixels == 0)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AnnotationMap):
            return NotImplemented
        return (
            self.classes == other.classes
            and self.image_id == other.image_id
            and bool(np.array_equal(self.class_maps, other.class_maps))
        )

    def __hash__(self) -> int:
        return hash((self.classes, self.image_id, self.class_maps.tobytes()))

    def __repr__(self) -> str:
        return (
            f"AnnotationMap(classes={self.classes}, shape={self.shape}, "
            f"conflicts={self.conflict_pixels}, image_id={self.image_id!r})"
        )


def _validate_instance(
    proposals: Sequence[BinaryMask], probs: ProbStack, cons: MatchConstraints
) -> None:
    if probs.classes != cons.classes:
        raise DimensionMismatch(
            f"prob stack has {probs.classes} classes, constraints expect {cons.classes}"
        )
    for i, p in enumerate(proposals):
        if p.shape != probs.shape:
            raise DimensionMismatch(
                f"proposal {i} has shape {p.shape}, prob stack is {probs.shape}"
            )


def _require_feasible(cons: MatchConstraints, k: int) -> None:
    need = sum(cons.v_lower)
    if need > k:
        raise InfeasibleConstraints(
            f"lower bounds require {need} distinct proposals but only {k} exist"
        )


def candidate_count(cons: MatchConstraints, k: int) -> int:
    """Number of per-class proposal subsets the exact solver would enumerate."""
    total = 0
    for lo, hi in zip(cons.v_lower, cons.v_upper):
        for t in range(lo, min(hi, k) + 1):
            total += math.comb(k, t)
    return total


def solve_matching(
    proposals: Sequence[BinaryMask],
    probs: ProbStack,
    cons: MatchConstraints,
    metric: Metric = Metric.SOFT_IOU,
) -> Assignment:
    """Maximize the summed per-class overlap of proposal unions, exactly.

    Enumerates, per foreground class, every index subset whose size lies in
    [v_lower, v_upper] together with its union score, then searches per-class
    choices under index disjointness with branch-and-bound.  Ties are broken
    toward the lexicographically smallest per-class index tuples (class 0
    first).  Falls back to ``solve_matching_greedy`` (``exact=False``) when the
    subset enumeration would exceed ``cons.exact_budget``.
    """
    proposals = list(proposals)
    _validate_instance(proposals, probs, cons)
    k = len(proposals)
    _require_feasible(cons, k)
    if candidate_count(cons, k) > cons.exact_budget:
        return solve_matching_greedy(proposals, probs, cons, metric)

    nfg = cons.foreground_classes
    # Per class: candidates as (score, subset, index bitmask), best score first.
    per_class: list[list[tuple[float, tuple[int, ...], int]]] = []
    for c in range(nfg):
        p_c = probs.class_map(c)
        cands: list[tuple[float, tuple[int, ...], int]] = []
        for t in range(cons.v_lower[c], min(cons.v_upper[c], k) + 1):
            for subset in itertools.combinations(range(k), t):
                u = clip_union(proposals, subset, dims=probs.shape)
                score = overlap_score(p_c, u, metric)
                mask = 0
                for i in subset:
                    mask |= 1 << i
                cands.append((score, subset, mask))
        cands.sort(key=lambda sc: (-sc[0], sc[1]))
        per_class.append(cands)

    # Optimistic per-class suffix bounds (disjointness ignored).
    suffix = [0.0] * (nfg + 1)
    for c in range(nfg - 1, -1, -1):
        suffix[c] = per_class[c][0][0] + suffix[c + 1]
    # Indices the classes after c still need for their lower bounds.
    need_after = [0] * (nfg + 1)
    for c in range(nfg - 1, -1, -1):
        need_after[c] = cons.v_lower[c] + need_after[c + 1]

    best_score = -math.inf
    best_key: tuple[tuple[int, ...], ...] | None = None
    best_scores: tuple[float, ...] = ()

    chosen: list[tuple[int, ...]] = [()] * nfg
    scores: list[float] = [0.0] * nfg

    def dfs(c: int, used: int, used_count: int, acc: float) -> None:
        nonlocal best_score, best_key, best_scores
        if c == nfg:
            key = tuple(chosen)
            if acc > best_score or (acc == best_score and (best_key is None or key < best_key)):
                best_score = acc
                best_key = key
                best_scores = tuple(scores)
            return
        if acc + suffix[c] < best_score - _PRUNE_SLACK:
            return
        rest = suffix[c + 1]
        for score, subset, mask in per_class[c]:
            if acc + score + rest < best_score - _PRUNE_SLACK:
                break  # candidates are sorted by score, none later can win
            if mask & used:
                continue
            if k - used_count - len(subset) < need_after[c + 1]:
                continue
            chosen[c] = subset
            scores[c] = score
            dfs(c + 1, used | mask, used_count + len(subset), acc + score)
        chosen[c] = ()
        scores[c] = 0.0

    dfs(0, 0, 0, 0.0)
    assert best_key is not None  # feasibility was checked upfront
    return Assignment(selections=best_key, per_class_iou=best_scores, exact=True)


def solve_matching_greedy(
    proposals: Sequence[BinaryMask],
    probs: ProbStack,
    cons: MatchConstraints,
    metric: Metric = Metric.SOFT_IOU,
) -> Assignment:
    """Heuristic matching used when the exact enumeration budget is exceeded.

    Classes are processed in descending order of their best single-proposal
    score.  Each class greedily adds the unused proposal with the largest
    strictly positive marginal union-score gain until v_upper is hit (never
    starving later classes' lower bounds), then is padded up to v_lower with
    the least-bad proposals.  One sweep of drop / swap / move / exchange local
    improvement follows.  Results carry ``exact=False``.
    """
    proposals = list(proposals)
    _validate_instance(proposals, probs, cons)
    k = len(proposals)
    _require_feasible(cons, k)
    nfg = cons.foreground_classes

    def score_of(c: int, sel: Sequence[int]) -> float:
        return overlap_score(probs.class_map(c), clip_union(proposals, sel, dims=probs.shape), metric)

    single = [[score_of(c, [i]) for i in range(k)] for c in range(nfg)]
    best_single = [max(single[c], default=0.0) for c in range(nfg)]
    class_order = sorted(range(nfg), key=lambda c: (-best_single[c], c))

    unused = set(range(k))
    selections: list[list[int]] = [[] for _ in range(nfg)]
    need_after = [0] * (len(class_order) + 1)
    for pos in range(len(class_order) - 1, -1, -1):
        need_after[pos] = cons.v_lower[class_order[pos]] + need_after[pos + 1]

    for pos, c in enumerate(class_order):
        sel = selections[c]
        current = score_of(c, sel)
        while len(sel) < cons.v_upper[c] and unused:
            # Extending past our own lower bound may not starve later classes.
            spare = len(unused) - need_after[pos + 1] - max(cons.v_lower[c] - len(sel), 0)
            if len(sel) >= cons.v_lower[c] and spare < 1:
                break
            best_gain, best_i = 0.0, -1
            for i in sorted(unused):
                gain = score_of(c, sel + [i]) - current
                if gain > best_gain + _IMPROVE_EPS:
                    best_gain, best_i = gain, i
            if best_i < 0:
                break
            sel.append(best_i)
            unused.discard(best_i)
            current += best_gain
        while len(sel) < cons.v_lower[c]:
            # Forced padding: take the least damaging proposal.
            best_gain, best_i = -math.inf, -1
            for i in sorted(unused):
                gain = score_of(c, sel + [i]) - current
                if gain > best_gain + _IMPROVE_EPS:
                    best_gain, best_i = gain, i
            if best_i < 0:
                raise InfeasibleConstraints(
                    f"class {c}: ran out of proposals while filling v_lower"
                )
            sel.append(best_i)
            unused.discard(best_i)
            current += best_gain

    scores = [score_of(c, selections[c]) for c in range(nfg)]

    def total() -> float:
        return sum(scores)

    # One sweep of local improvement; each strictly improving move applies
    # immediately and later checks see the updated state.
    for c in range(nfg):
        for i in sorted(selections[c]):
            if len(selections[c]) > cons.v_lower[c]:
                trial = [x for x in selections[c] if x != i]
                s = score_of(c, trial)
                if s > scores[c] + _IMPROVE_EPS:
                    selections[c] = trial
                    scores[c] = s
                    unused.add(i)
    for c in range(nfg):
        for i in sorted(selections[c]):
            for j in sorted(unused):
                trial = sorted(x for x in selections[c] if x != i) + [j]
                s = score_of(c, trial)
                if s > scores[c] + _IMPROVE_EPS:
                    selections[c] = trial
                    scores[c] = s
                    unused.discard(j)
                    unused.add(i)
                    break
    for c in range(nfg):
        for i in sorted(selections[c]):
            for c2 in range(nfg):
                if c2 == c:
                    continue
                if len(selections[c]) <= cons.v_lower[c] or len(selections[c2]) >= cons.v_upper[c2]:
                    continue
                t1 = [x for x in selections[c] if x != i]
                t2 = selections[c2] + [i]
                s1, s2 = score_of(c, t1), score_of(c2, t2)
                if s1 + s2 > scores[c] + scores[c2] + _IMPROVE_EPS:
                    selections[c], selections[c2] = t1, t2
                    scores[c], scores[c2] = s1, s2
                    break
    for c in range(nfg):
        for c2 in range(c + 1, nfg):
            done = False
            for i in sorted(selections[c]):
                for j in sorted(selections[c2]):
                    t1 = sorted(x for x in selections[c] if x != i) + [j]
                    t2 = sorted(x for x in selections[c2] if x != j) + [i]
                    s1, s2 = score_of(c, t1), score_of(c2, t2)
                    if s1 + s2 > scores[c] + scores[c2] + _IMPROVE_EPS:
                        selections[c], selections[c2] = t1, t2
                        scores[c], scores[c2] = s1, s2
                        done = True
                        break
                if done:
                    break

    return Assignment(
        selections=tuple(tuple(sorted(s)) for s in selections),
        per_class_iou=tuple(scores),
        exact=False,
    )


def beta_score(assignment: Assignment) -> float:
    """Mean per-foreground-class overlap score of a matching."""
    return assignment.beta


def classify_case(assignment: Assignment, cons: MatchConstraints) -> CaseLabel:
    """CASE1 when beta clears the acceptance threshold (inclusive), else CASE2."""
    return CaseLabel.CASE1 if assignment.beta >= cons.beta_star else CaseLabel.CASE2


def build_annotation(
    proposals: Sequence[BinaryMask],
    assignment: Assignment,
    dims: tuple[int, int],
    image_id: str | None = None,
) -> AnnotationMap:
    """Construct the machine annotation from an assignment's selections.

    Each foreground map is the clip-union of its class's selected proposals;
    everything outside their union is background.
    """
    proposals = list(proposals)
    maps = [
        clip_union(proposals, sel, dims=dims).bits for sel in assignment.selections
    ]
    return AnnotationMap(np.stack(maps), image_id=image_id, assignment=assignment)


def check_assignment(assignment: Assignment, cons: MatchConstraints, k: int) -> None:
    """Assert feasibility of an assignment against its constraints.

    Raises AssertionError on violation; used as a postcondition in tests and
    verification drivers.
    """
    assert len(assignment.selections) == cons.foreground_classes
    seen: set[int] = set()
    for c, sel in enumerate(assignment.selections):
        assert cons.v_lower[c] <= len(sel) <= cons.v_upper[c], (
            f"class {c}: |selection|={len(sel)} outside [{cons.v_lower[c]}, {cons.v_upper[c]}]"
        )
        for i in sel:
            assert 0 <= i < k, f"index {i} out of range"
            assert i not in seen, f"index {i} reused across classes"
            seen.add(i)
    assert 0.0 <= assignment.beta <= 1.0 + 1e-12
