import numpy as np

from maskmatch.matching import check_assignment
from maskmatch.verify import (
    SuiteResult,
    equivalence_trials,
    monotonicity_trials,
    random_instance,
    rejection_bound_trials,
    run_verify,
)


def test_random_instances_stay_inside_the_oracle_envelope():
    for trial in range(30):
        proposals, probs, cons = random_instance(np.random.SeedSequence(1, spawn_key=(trial,)))
        assert 1 <= len(proposals) <= 10
        assert 2 <= cons.classes <= 4
        assert all(v <= 3 for v in cons.v_upper)
        assert probs.shape[0] <= 32 and probs.shape[1] <= 32
        assert sum(cons.v_lower) <= len(proposals)


def test_random_instance_is_seed_stable():
    a = random_instance(np.random.SeedSequence(5, spawn_key=(9,)))
    b = random_instance(np.random.SeedSequence(5, spawn_key=(9,)))
    assert a[0] == b[0]
    assert a[1].maps.tobytes() == b[1].maps.tobytes()
    assert a[2] == b[2]


def test_equivalence_suite_small_run_is_clean():
    result = equivalence_trials(n=25, seed=7)
    assert result.ok
    assert result.trials == 25
    assert len(result.rows) == 25
    assert "oracle-equivalence: ok" in result.summary_line()


def test_monotonicity_suite_small_run_is_clean():
    result = monotonicity_trials(n=10, seed=7)
    assert result.ok
    assert all(r["objective_widened"] >= r["objective_base"] for r in result.rows)


def test_rejection_bound_suite_counts_only_rejected_instances():
    result = rejection_bound_trials(n=8, seed=7)
    assert result.ok
    case2_rows = [r for r in result.rows if r["case"] == "case2"]
    assert len(case2_rows) == 8
    for r in case2_rows:
        assert r["max_iou_gt_pred"] <= r["bound"] + 1e-9


def test_run_verify_aggregates_and_reports():
    report = run_verify(trials=6, seed=7, mono_trials=4, bound_trials=4)
    assert report.ok
    assert len(report.suites) == 3
    lines = report.summary_lines()
    assert lines[-1] == "verify: all checks passed"
    assert len(report.all_rows()) == sum(len(s.rows) for s in report.suites)


def test_suite_result_failure_formatting():
    bad = SuiteResult(name="x", trials=3, failures=(2,))
    assert not bad.ok
    assert "FAIL" in bad.summary_line()


def test_verify_rows_feed_feasibility_checker():
    # every assignment produced inside the suites must already be feasible;
    # spot-check by re-solving a few instances and running the checker
    from maskmatch.matching import solve_matching

    for trial in range(10):
        proposals, probs, cons = random_instance(np.random.SeedSequence(7, spawn_key=(0, trial)))
        a = solve_matching(proposals, probs, cons)
        check_assignment(a, cons, len(proposals))
