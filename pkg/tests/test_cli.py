import json

import numpy as np
import pytest

from maskmatch.cli import main
from maskmatch.formats import (
    RunDir,
    load_annotation,
    load_assignment,
    proposals_from_masks,
    save_proposals,
    save_raster,
)
from maskmatch.masks import BinaryMask
from maskmatch.verify import SuiteResult, VerifyReport


@pytest.fixture
def worked_files(tmp_path):
    s0 = np.zeros((4, 4), dtype=bool)
    s0[0:2, 0:2] = True
    s1 = np.zeros((4, 4), dtype=bool)
    s1[2:4, 0:2] = True
    fg = (s0 | s1).astype(np.float32)
    save_raster(tmp_path / "probs.rast", np.stack([fg, 1.0 - fg]))
    save_proposals(
        tmp_path / "props.json",
        proposals_from_masks("demo", [BinaryMask(s0), BinaryMask(s1)]),
    )
    return tmp_path


class TestUsageErrors:
    def test_no_subcommand(self, capsys):
        assert main([]) == 1
        capsys.readouterr()

    def test_unknown_subcommand(self, capsys):
        assert main(["frobnicate"]) == 1
        capsys.readouterr()

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "match" in capsys.readouterr().out

    def test_bad_bound_vector(self, worked_files, capsys):
        code = main(
            [
                "match",
                "--proposals", str(worked_files / "props.json"),
                "--probs", str(worked_files / "probs.rast"),
                "--out-dir", str(worked_files / "out"),
                "--v-upper", "1,2,3",
            ]
        )
        assert code == 1
        assert "--v-upper" in capsys.readouterr().err

    def test_inverted_bounds(self, worked_files, capsys):
        code = main(
            [
                "match",
                "--proposals", str(worked_files / "props.json"),
                "--probs", str(worked_files / "probs.rast"),
                "--out-dir", str(worked_files / "out"),
                "--v-lower", "2", "--v-upper", "1",
            ]
        )
        assert code == 1
        assert "v_lower" in capsys.readouterr().err


class TestMatch:
    def test_worked_example_tight_and_wide(self, worked_files, capsys):
        base = [
            "match",
            "--proposals", str(worked_files / "props.json"),
            "--probs", str(worked_files / "probs.rast"),
        ]
        assert main(base + ["--out-dir", str(worked_files / "m1"), "--v-upper", "1"]) == 0
        out = capsys.readouterr().out
        assert "beta=0.500000" in out and "case=case2" in out
        a1 = load_assignment(worked_files / "m1" / "assignment.json")
        assert a1.selections == ((0,),)

        assert main(base + ["--out-dir", str(worked_files / "m2"), "--v-upper", "2"]) == 0
        out = capsys.readouterr().out
        assert "beta=1.000000" in out and "case=case1" in out
        ann, beta = load_annotation(worked_files / "m2" / "annotation.json")
        assert beta == 1.0
        assert ann.class_mask(0).popcount() == 8

    def test_data_errors_exit_two(self, worked_files, capsys):
        bad = worked_files / "bad.rast"
        bad.write_bytes(b"garbage")
        code = main(
            [
                "match",
                "--proposals", str(worked_files / "props.json"),
                "--probs", str(bad),
                "--out-dir", str(worked_files / "out"),
            ]
        )
        assert code == 2
        assert "error:" in capsys.readouterr().err

    def test_missing_input_file_exits_two(self, tmp_path, capsys):
        code = main(
            [
                "match",
                "--proposals", str(tmp_path / "missing.json"),
                "--probs", str(tmp_path / "nosuch.rast"),
                "--out-dir", str(tmp_path / "out"),
            ]
        )
        assert code == 2
        err = capsys.readouterr().err
        assert "error:" in err and "missing.json" in err

    def test_infeasible_data_exits_two(self, worked_files, capsys):
        code = main(
            [
                "match",
                "--proposals", str(worked_files / "props.json"),
                "--probs", str(worked_files / "probs.rast"),
                "--out-dir", str(worked_files / "out"),
                "--v-lower", "3", "--v-upper", "3",
            ]
        )
        assert code == 2
        assert "infeasible" in capsys.readouterr().err


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    code = main(
        [
            "gen-synth",
            "--seed", "3",
            "--out-dir", str(root),
            "--dims", "24x24",
            "--n-human", "3",
            "--n-unlabeled", "6",
            "--n-held-out", "2",
        ]
    )
    assert code == 0
    return root


class TestRunAndResume:
    def run_args(self, ds, out, extra=()):
        return [
            "run",
            "--manifest", str(ds / "manifest.json"),
            "--out-dir", str(out),
            "--eval-manifest", str(ds / "heldout-manifest.json"),
            "--seed", "0",
            "--max-rounds", "3",
            *extra,
        ]

    def test_run_writes_artifacts_and_reruns_identically(self, small_dataset, tmp_path, capsys):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        assert main(self.run_args(small_dataset, out1)) == 0
        stdout = capsys.readouterr().out
        assert "round 0:" in stdout and "stopped after" in stdout
        for name in ("state.json", "history.csv", "history.png", "log.txt"):
            assert (out1 / name).exists()
        assert (out1 / "history.png").stat().st_size > 1000
        assert not (out1 / ".lock").exists()

        assert main(self.run_args(small_dataset, out2)) == 0
        capsys.readouterr()
        for name in ("state.json", "history.csv", "model.json"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_second_run_without_resume_is_refused(self, small_dataset, tmp_path, capsys):
        out = tmp_path / "r"
        assert main(self.run_args(small_dataset, out)) == 0
        capsys.readouterr()
        assert main(self.run_args(small_dataset, out)) == 2
        assert "--resume" in capsys.readouterr().err

    def test_resume_completes_and_matches(self, small_dataset, tmp_path, capsys):
        straight, broken = tmp_path / "straight", tmp_path / "broken"
        assert main(self.run_args(small_dataset, straight)) == 0
        capsys.readouterr()

        # simulate a crash: run only the first round, leave state.json behind
        from maskmatch.formats import load_examples, load_manifest, schedule_to_doc
        from maskmatch.loop import DatasetState, RoundSchedule, run_round
        from maskmatch.model import ReferenceTrainer

        manifest = load_manifest(small_dataset / "manifest.json")
        human, unlabeled = load_examples(manifest, small_dataset)
        evals_manifest = load_manifest(small_dataset / "heldout-manifest.json")
        from maskmatch.formats import load_eval_examples

        evals = load_eval_examples(evals_manifest, small_dataset)
        sched = RoundSchedule(max_rounds=3)
        config = {
            "schedule": schedule_to_doc(sched),
            "seed": 0,
            "readmit": False,
            "manifest": str(small_dataset / "manifest.json"),
        }
        state = DatasetState(human=tuple(human), machine=(), unlabeled=tuple(unlabeled))
        state, _, _ = run_round(state, ReferenceTrainer(), sched, seed=0, eval_examples=evals)
        rd = RunDir(broken).ensure()
        rd.save_state(state, config)

        assert main(self.run_args(small_dataset, broken, extra=["--resume"])) == 0
        capsys.readouterr()
        assert (broken / "state.json").read_bytes() == (straight / "state.json").read_bytes()
        assert (broken / "history.csv").read_bytes() == (straight / "history.csv").read_bytes()

    def test_locked_run_dir_exits_two(self, small_dataset, tmp_path, capsys):
        out = tmp_path / "locked"
        out.mkdir()
        (out / ".lock").touch()
        assert main(self.run_args(small_dataset, out)) == 2
        assert "lock" in capsys.readouterr().err


class TestReportingCommands:
    def test_coverage(self, small_dataset, tmp_path, capsys):
        out = tmp_path / "cov"
        code = main(
            [
                "coverage",
                "--manifest", str(small_dataset / "heldout-manifest.json"),
                "--out-dir", str(out),
            ]
        )
        assert code == 0
        assert "mean Dice" in capsys.readouterr().out
        assert (out / "coverage.csv").exists() and (out / "coverage.png").exists()

    def test_report_selection(self, tmp_path, capsys):
        out = tmp_path / "sel"
        code = main(
            [
                "report-selection",
                "--seed", "0",
                "--out-dir", str(out),
                "--levels", "4",
                "--per-level", "3",
                "--buckets", "3",
            ]
        )
        assert code == 0
        stdout = capsys.readouterr().out
        assert "bucket" in stdout and "spearman" in stdout
        assert (out / "samples.csv").exists()
        assert (out / "buckets.csv").exists()
        assert (out / "buckets.png").exists()

    def test_verify_ok_and_artifacts(self, tmp_path, capsys):
        out = tmp_path / "ver"
        code = main(
            [
                "verify",
                "--trials", "12",
                "--mono-trials", "5",
                "--bound-trials", "6",
                "--out-dir", str(out),
            ]
        )
        assert code == 0
        assert "all checks passed" in capsys.readouterr().out
        rows = (out / "verify.jsonl").read_text().splitlines()
        assert rows and all(json.loads(r) for r in rows)

    def test_verify_failure_exits_three(self, monkeypatch, capsys):
        failing = VerifyReport(
            suites=(SuiteResult(name="oracle-equivalence", trials=3, failures=(1,)),)
        )
        import maskmatch.cli as cli_mod

        monkeypatch.setattr(cli_mod, "run_verify", lambda **kw: failing)
        assert main(["verify", "--trials", "1"]) == 3
        assert "FAIL" in capsys.readouterr().out
