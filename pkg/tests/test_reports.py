import csv
import json

import pytest

from maskmatch.errors import EmptyInput
from maskmatch.matching import MatchConstraints
from maskmatch.reports import (
    SelectionSample,
    default_sweep_constraints,
    render_bucket_figure,
    render_coverage_figure,
    render_history_figure,
    round_record_rows,
    score_instance,
    selection_quality_report,
    write_csv,
    write_jsonl,
)
from maskmatch.loop import RoundRecord
from maskmatch.synth import SynthParams, gen_synthetic_instance


def sample(i, beta, iou):
    return SelectionSample(
        sample_id=f"s{i}", beta=beta, case1=beta >= 0.9, iou_annotation=iou, iou_prediction=beta
    )


def test_score_instance_perfect_fidelity_is_case1_with_full_iou():
    inst = gen_synthetic_instance(4, SynthParams(dims=(20, 20), fidelity=1.0, noise_rate=0.0))
    got = score_instance(inst, default_sweep_constraints(inst), "x")
    assert got.case1
    assert got.beta == pytest.approx(1.0)
    assert got.iou_annotation == pytest.approx(1.0)


def test_default_sweep_constraints_allow_the_fragment_cover():
    inst = gen_synthetic_instance(4, SynthParams(dims=(20, 20)))
    cons = default_sweep_constraints(inst)
    assert isinstance(cons, MatchConstraints)
    assert cons.v_lower == (0,) * inst.gt.foreground_classes
    assert all(hi >= c for hi, c in zip(cons.v_upper, inst.fragment_counts()))


class TestBuckets:
    def test_buckets_sorted_by_beta_and_monotone_on_clean_data(self):
        samples = [sample(i, beta=i / 20.0, iou=i / 20.0) for i in range(20)]
        report = selection_quality_report(samples, buckets=4)
        assert [b.rank for b in report.buckets] == [1, 2, 3, 4]
        betas = [b.mean_beta for b in report.buckets]
        ious = [b.mean_iou_annotation for b in report.buckets]
        assert betas == sorted(betas, reverse=True)
        assert ious == sorted(ious, reverse=True)
        assert report.spearman_rank_iou == pytest.approx(1.0)

    def test_case_gap_reported_when_both_cases_present(self):
        samples = [sample(0, 0.95, 0.99), sample(1, 0.97, 0.98), sample(2, 0.3, 0.5)]
        report = selection_quality_report(samples, buckets=2)
        assert report.case1_mean_iou == pytest.approx((0.99 + 0.98) / 2)
        assert report.case2_mean_iou == pytest.approx(0.5)
        assert report.case_gap == pytest.approx(report.case1_mean_iou - 0.5)

    def test_empty_input_raises(self):
        with pytest.raises(EmptyInput):
            selection_quality_report([])

    def test_more_buckets_than_samples_collapses(self):
        report = selection_quality_report([sample(0, 0.5, 0.5)], buckets=10)
        assert len(report.buckets) == 1
        assert report.buckets[0].count == 1


def test_write_csv_preserves_insertion_order_and_lf(tmp_path):
    path = tmp_path / "t.csv"
    write_csv(path, [{"b": 1, "a": 2}, {"b": 3, "a": 4, "c": 5}])
    raw = path.read_bytes()
    assert b"\r" not in raw
    rows = list(csv.DictReader(raw.decode().splitlines()))
    assert list(rows[0].keys()) == ["b", "a", "c"]
    assert rows[1]["c"] == "5"


def test_write_jsonl_is_canonical(tmp_path):
    path = tmp_path / "t.jsonl"
    write_jsonl(path, [{"b": 1, "a": 2}])
    line = path.read_text().strip()
    assert line == '{"a":2,"b":1}'
    assert json.loads(line) == {"a": 2, "b": 1}


def _record(i, added=("x",), dice=0.5):
    return RoundRecord(
        round_index=i,
        v_lower=(1,),
        v_upper=(2,),
        added_ids=added,
        readmitted_ids=(),
        demoted_ids=(),
        infeasible_ids=(),
        mean_beta_added=0.95 if added else None,
        pool_human=3,
        pool_machine=i,
        pool_unlabeled=9 - i,
        eval_dice=dice,
    )


def test_round_record_rows_flatten_for_csv():
    rows = round_record_rows([_record(0, added=("a", "b")), _record(1, added=())])
    assert rows[0]["added_ids"] == "a;b"
    assert rows[0]["added"] == 2
    assert rows[1]["mean_beta_added"] == ""
    assert rows[0]["round"] == 0


def test_figures_render_nonempty_files(tmp_path):
    samples = [sample(i, beta=i / 10.0, iou=i / 10.0) for i in range(10)]
    report = selection_quality_report(samples, buckets=2)
    render_bucket_figure(report, tmp_path / "b.png")
    render_history_figure([_record(0), _record(1)], tmp_path / "h.png")
    render_coverage_figure([0.2, 0.8, 0.9], tmp_path / "c.png")
    for name in ("b.png", "h.png", "c.png"):
        assert (tmp_path / name).stat().st_size > 1000
