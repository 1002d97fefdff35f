import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskmatch.errors import DimensionMismatch, InfeasibleConstraints
from maskmatch.masks import BinaryMask
from maskmatch.matching import (
    AnnotationMap,
    Assignment,
    CaseLabel,
    MatchConstraints,
    beta_score,
    build_annotation,
    candidate_count,
    check_assignment,
    classify_case,
    solve_matching,
    solve_matching_greedy,
)
from maskmatch.oracle import brute_force_solve
from maskmatch.probs import ProbStack
from maskmatch.verify import random_instance


def worked_example():
    """4x4 single-foreground instance whose optimum is known in closed form.

    The prediction is exactly the union of the two proposals, so selecting
    either one alone scores IoU 0.5 and selecting both scores 1.0.
    """
    s0 = np.zeros((4, 4), dtype=bool)
    s0[0:2, 0:2] = True
    s1 = np.zeros((4, 4), dtype=bool)
    s1[2:4, 0:2] = True
    fg = (s0 | s1).astype(np.float32)
    probs = ProbStack(np.stack([fg, 1.0 - fg]))
    return [BinaryMask(s0), BinaryMask(s1)], probs


def cons_for(v_lower, v_upper, **kw):
    return MatchConstraints(classes=2, v_lower=v_lower, v_upper=v_upper, **kw)


class TestWorkedExample:
    def test_tight_bound_picks_lowest_index_on_tie(self):
        masks, probs = worked_example()
        a = solve_matching(masks, probs, cons_for((1,), (1,)))
        assert a.selections == ((0,),)
        assert a.per_class_iou == (0.5,)
        assert a.beta == 0.5
        assert a.exact

    def test_wider_bound_reaches_perfect_match(self):
        masks, probs = worked_example()
        a = solve_matching(masks, probs, cons_for((1,), (2,)))
        assert a.selections == ((0, 1),)
        assert a.beta == 1.0
        assert classify_case(a, cons_for((1,), (2,))) is CaseLabel.CASE1

    def test_oracle_agrees_on_both_bounds(self):
        masks, probs = worked_example()
        for v_upper in ((1,), (2,)):
            cons = cons_for((1,), v_upper)
            assert brute_force_solve(masks, probs, cons) == solve_matching(masks, probs, cons)


class TestConstraints:
    def test_validation_errors(self):
        with pytest.raises(ValueError, match="bounds must have"):
            MatchConstraints(classes=3, v_lower=(0,), v_upper=(1, 1))
        with pytest.raises(ValueError, match="v_lower <= v_upper"):
            MatchConstraints(classes=2, v_lower=(2,), v_upper=(1,))
        with pytest.raises(ValueError, match="beta_star"):
            MatchConstraints(classes=2, v_lower=(0,), v_upper=(1,), beta_star=1.5)
        with pytest.raises(ValueError, match="classes"):
            MatchConstraints(classes=1, v_lower=(), v_upper=())
        with pytest.raises(ValueError, match="budget"):
            MatchConstraints(classes=2, v_lower=(0,), v_upper=(1,), exact_budget=0)

    def test_infeasible_lower_bounds_raise(self):
        masks, probs = worked_example()
        with pytest.raises(InfeasibleConstraints, match="3 distinct proposals"):
            solve_matching(masks, probs, cons_for((3,), (3,)))

    def test_dimension_mismatches_raise(self):
        masks, probs = worked_example()
        with pytest.raises(DimensionMismatch):
            solve_matching([BinaryMask.zeros(5, 5)], probs, cons_for((0,), (1,)))
        bad_stack = ProbStack(np.zeros((3, 4, 4), dtype=np.float32))
        with pytest.raises(DimensionMismatch):
            solve_matching(masks, bad_stack, cons_for((0,), (1,)))

    def test_candidate_count_is_sum_of_binomials(self):
        cons = MatchConstraints(classes=3, v_lower=(0, 1), v_upper=(2, 2))
        # class 0: C(4,0)+C(4,1)+C(4,2) = 11; class 1: C(4,1)+C(4,2) = 10
        assert candidate_count(cons, 4) == 21


class TestAssignment:
    def test_selections_are_normalized_and_disjoint(self):
        a = Assignment(selections=((2, 0),), per_class_iou=(0.5,), exact=True)
        assert a.selections == ((0, 2),)
        with pytest.raises(ValueError, match="more than one class"):
            Assignment(selections=((0,), (0,)), per_class_iou=(0.5, 0.5), exact=True)

    def test_objective_and_beta_derived(self):
        a = Assignment(selections=((0,), (1,)), per_class_iou=(0.4, 0.8), exact=True)
        assert a.objective == pytest.approx(1.2)
        assert a.beta == pytest.approx(0.6)
        assert beta_score(a) == pytest.approx(0.6)

    def test_case_threshold_is_inclusive(self):
        cons = cons_for((0,), (1,), beta_star=0.9)
        at = Assignment(selections=((0,),), per_class_iou=(0.9,), exact=True)
        below = Assignment(selections=((0,),), per_class_iou=(0.8999999,), exact=True)
        assert classify_case(at, cons) is CaseLabel.CASE1
        assert classify_case(below, cons) is CaseLabel.CASE2


class TestAnnotationMap:
    def test_label_map_resolves_conflicts_to_lowest_class(self):
        m0 = np.zeros((2, 2), dtype=bool)
        m0[0, :] = True
        m1 = np.zeros((2, 2), dtype=bool)
        m1[:, 0] = True
        ann = AnnotationMap(np.stack([m0, m1]))
        assert ann.conflict_pixels == 1  # pixel (0,0) is claimed twice
        labels = ann.label_map()
        assert labels[0, 0] == 0
        assert labels[1, 0] == 1
        assert labels[1, 1] == 2  # background is the last class

    def test_prob_stack_roundtrip_without_conflicts(self):
        m0 = np.zeros((2, 2), dtype=bool)
        m0[0, :] = True
        ann = AnnotationMap(m0[None])
        stack = ann.to_prob_stack()
        assert stack.normalized
        assert np.array_equal(stack.class_map(0) > 0.5, m0)
        assert np.allclose(stack.maps.sum(axis=0), 1.0)

    def test_build_annotation_carries_assignment_and_id(self):
        masks, probs = worked_example()
        cons = cons_for((1,), (2,))
        a = solve_matching(masks, probs, cons)
        ann = build_annotation(masks, a, probs.shape, image_id="img-7")
        assert ann.image_id == "img-7"
        assert ann.assignment == a
        assert ann.class_mask(0) == BinaryMask(masks[0].bits | masks[1].bits)


class TestSolver:
    def test_empty_class_selection_is_allowed_at_zero_lower_bound(self):
        masks, _ = worked_example()
        # class 0 prediction is empty: selecting nothing scores a perfect 1.0
        probs = ProbStack(np.stack([np.zeros((4, 4)), np.ones((4, 4))]).astype(np.float32))
        a = solve_matching(masks, probs, cons_for((0,), (2,)))
        assert a.selections == ((),)
        assert a.per_class_iou == (1.0,)

    def test_budget_exceeded_falls_back_to_feasible_greedy(self):
        rng = np.random.default_rng(5)
        masks = [BinaryMask(rng.random((8, 8)) > 0.6) for _ in range(8)]
        probs = ProbStack(rng.random((3, 8, 8)).astype(np.float32))
        cons = MatchConstraints(
            classes=3, v_lower=(1, 1), v_upper=(3, 3), exact_budget=4
        )
        a = solve_matching(masks, probs, cons)
        assert not a.exact
        check_assignment(a, cons, len(masks))
        exact = solve_matching(
            masks, probs, MatchConstraints(classes=3, v_lower=(1, 1), v_upper=(3, 3))
        )
        assert exact.exact
        assert a.objective <= exact.objective + 1e-12

    def test_greedy_never_beats_exact_and_stays_feasible(self):
        for trial in range(25):
            proposals, probs, cons = random_instance(
                np.random.SeedSequence(99, spawn_key=(trial,))
            )
            exact = solve_matching(proposals, probs, cons)
            greedy = solve_matching_greedy(proposals, probs, cons)
            check_assignment(exact, cons, len(proposals))
            check_assignment(greedy, cons, len(proposals))
            assert greedy.objective <= exact.objective + 1e-9

    def test_solver_is_deterministic(self):
        proposals, probs, cons = random_instance(np.random.SeedSequence(4242))
        first = solve_matching(proposals, probs, cons)
        for _ in range(3):
            assert solve_matching(proposals, probs, cons) == first

    @settings(max_examples=40)
    @given(st.integers(0, 10_000))
    def test_exact_solver_matches_oracle_on_random_instances(self, trial):
        proposals, probs, cons = random_instance(np.random.SeedSequence(7, spawn_key=(0, trial)))
        got = solve_matching(proposals, probs, cons)
        want = brute_force_solve(proposals, probs, cons)
        assert got.selections == want.selections
        assert got.objective == pytest.approx(want.objective, abs=1e-9)

    @settings(max_examples=40)
    @given(st.integers(0, 10_000))
    def test_widening_upper_bounds_never_hurts(self, trial):
        proposals, probs, cons = random_instance(np.random.SeedSequence(7, spawn_key=(1, trial)))
        wider = MatchConstraints(
            classes=cons.classes,
            v_lower=cons.v_lower,
            v_upper=tuple(v + 1 for v in cons.v_upper),
            beta_star=cons.beta_star,
            exact_budget=cons.exact_budget,
        )
        base = solve_matching(proposals, probs, cons)
        widened = solve_matching(proposals, probs, wider)
        assert widened.objective >= base.objective
