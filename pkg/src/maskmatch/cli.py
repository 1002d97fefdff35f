"""Command line front end.

Subcommands: ``match`` (one image), ``run`` (the full labeling loop over a
manifest), ``gen-synth`` (write a synthetic dataset to disk), ``coverage``
(how well the proposals can cover ground truth), ``report-selection``
(selection-quality sweep with figures), and ``verify`` (randomized
cross-checks against the exhaustive reference solver).

Exit codes: 0 success, 1 usage error, 2 data or validation error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyInput,
    InfeasibleConstraints,
    MalformedRecord,
    MaskMatchError,
)
from .formats import (
    RunDir,
    load_eval_examples,
    load_examples,
    load_manifest,
    load_proposals,
    load_raster,
    save_annotation,
    save_assignment,
    atomic_write_text,
    canonical_dumps,
    schedule_from_doc,
    schedule_to_doc,
    write_dataset,
)
from .loop import DatasetState, RoundSchedule, run_loop
from .matching import (
    MatchConstraints,
    build_annotation,
    classify_case,
    solve_matching,
    solve_matching_greedy,
)
from .model import ReferenceModel, ReferenceTrainer
from .oracle import oracle_coverage
from .probs import ProbStack, validate_prob_stack
from .reports import (
    render_bucket_figure,
    render_coverage_figure,
    render_history_figure,
    round_record_rows,
    score_instance,
    default_sweep_constraints,
    selection_quality_report,
    write_csv,
    write_jsonl,
)
from .synth import DatasetParams, gen_fidelity_sweep, gen_synthetic_dataset
from .verify import run_verify

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3


class UsageError(Exception):
    """A bad flag value that argparse alone could not catch."""


# --- small parsers -----------------------------------------------------------


def _parse_bounds(text: str | None, nfg: int, flag: str, default: int) -> tuple[int, ...]:
    """Parse a per-class count vector: one value broadcasts, else one per class."""
    if text is None:
        return (default,) * nfg
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated integers, got {text!r}") from None
    if len(values) == 1:
        return values * nfg
    if len(values) != nfg:
        raise UsageError(f"{flag}: expected 1 or {nfg} values, got {len(values)}")
    return values


def _parse_schedule(text: str) -> tuple[tuple[int, int], ...]:
    """Parse ``lo:hi`` pairs, e.g. ``1:1,1:2,1:3``."""
    entries = []
    for part in text.split(","):
        lo, sep, hi = part.partition(":")
        if not sep:
            raise UsageError(f"--schedule: expected lo:hi pairs, got {part!r}")
        try:
            entries.append((int(lo), int(hi)))
        except ValueError:
            raise UsageError(f"--schedule: non-integer bound in {part!r}") from None
    return tuple(entries)


def _parse_dims(text: str) -> tuple[int, int]:
    h, sep, w = text.partition("x")
    try:
        if not sep:
            raise ValueError
        return (int(h), int(w))
    except ValueError:
        raise UsageError(f"--dims: expected HxW, got {text!r}") from None


# --- subcommands -------------------------------------------------------------


def cmd_match(args: argparse.Namespace) -> int:
    pset = load_proposals(args.proposals)
    stack = ProbStack(load_raster(args.probs))
    report = validate_prob_stack(stack)
    if not report.ok:
        raise MaskMatchError(f"{args.probs}: not a probability stack: {report.describe()}")
    if pset.size != stack.shape:
        raise DimensionMismatch(
            f"proposals are {pset.size[0]}x{pset.size[1]} but the stack is "
            f"{stack.height}x{stack.width}"
        )
    nfg = stack.foreground_classes
    try:
        cons = MatchConstraints(
            classes=stack.classes,
            v_lower=_parse_bounds(args.v_lower, nfg, "--v-lower", 0),
            v_upper=_parse_bounds(args.v_upper, nfg, "--v-upper", 1),
            beta_star=args.beta_star,
            exact_budget=args.exact_budget,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    masks = pset.masks()
    solve = solve_matching_greedy if args.greedy else solve_matching
    assignment = solve(masks, stack, cons)
    annotation = build_annotation(masks, assignment, stack.shape, image_id=pset.image_id)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_assignment(out / "assignment.json", assignment)
    save_annotation(out / "annotation.json", annotation, beta=assignment.beta)

    case = classify_case(assignment, cons)
    print(
        f"beta={assignment.beta:.6f} case={case.value} "
        f"exact={str(assignment.exact).lower()} objective={assignment.objective:.6f}"
    )
    for c, (sel, iou) in enumerate(zip(assignment.selections, assignment.per_class_iou)):
        chosen = ",".join(str(i) for i in sel) or "-"
        print(f"class {c}: proposals [{chosen}] iou={iou:.6f}")
    print(f"wrote {out / 'assignment.json'} and {out / 'annotation.json'}")
    return EXIT_OK


def cmd_gen_synth(args: argparse.Namespace) -> int:
    try:
        params = DatasetParams(
            dims=_parse_dims(args.dims),
            classes=args.classes,
            n_human=args.n_human,
            n_unlabeled=args.n_unlabeled,
            n_held_out=args.n_held_out,
            fidelity=args.fidelity,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    ds = gen_synthetic_dataset(args.seed, params)
    manifest_path, heldout_path = write_dataset(args.out_dir, ds)
    print(
        f"wrote {len(ds.human)} labeled + {len(ds.unlabeled)} unlabeled images "
        f"to {manifest_path}"
    )
    print(f"wrote {len(ds.held_out)} held-out images to {heldout_path}")
    return EXIT_OK


def _build_schedule(args: argparse.Namespace) -> RoundSchedule:
    if args.schedule is not None:
        entries = _parse_schedule(args.schedule)
    elif args.v_lower is not None or args.v_upper is not None:
        lo = int(args.v_lower) if args.v_lower is not None else 1
        hi = int(args.v_upper) if args.v_upper is not None else max(lo, 1)
        entries = ((lo, hi),)
    else:
        entries = ((1, 1), (1, 2), (1, 3))
    try:
        return RoundSchedule(
            entries=entries,
            max_rounds=args.max_rounds,
            lam=args.lam,
            beta_star=args.beta_star,
            exact_budget=args.exact_budget,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None


def cmd_run(args: argparse.Namespace) -> int:
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    human, unlabeled = load_examples(manifest, manifest_path.parent)
    evals = None
    if args.eval_manifest is not None:
        eval_path = Path(args.eval_manifest)
        evals = load_eval_examples(load_manifest(eval_path), eval_path.parent)

    trainer = ReferenceTrainer(temperature=args.temperature)
    with RunDir(args.out_dir) as rd:
        if args.resume:
            state, config = rd.load_state(human, unlabeled)
            for key in ("schedule", "seed", "readmit"):
                if key not in config:
                    raise MalformedRecord(f"{rd.state_path}: config lacks {key!r}")
            sched = schedule_from_doc(config["schedule"], f"{rd.state_path}.config.schedule")
            seed = int(config["seed"])
            readmit = bool(config["readmit"])
            rd.log(f"resume at round {state.round}")
            print(f"resuming at round {state.round} (schedule and seed from state.json)")
        else:
            if rd.has_state():
                raise MaskMatchError(
                    f"{rd.state_path} already exists: pass --resume to continue that run"
                )
            sched = _build_schedule(args)
            seed = args.seed
            readmit = args.readmit
            state = DatasetState(human=tuple(human), machine=(), unlabeled=tuple(unlabeled))
            config = {
                "schedule": schedule_to_doc(sched),
                "seed": seed,
                "readmit": readmit,
                "manifest": str(args.manifest),
            }
            rd.save_state(state, config)
            rd.log(f"start: {len(human)} human, {len(unlabeled)} unlabeled")

        def checkpoint(st: DatasetState) -> None:
            rd.save_state(st, config)
            r = st.history[-1]
            rd.log(
                f"round {r.round_index}: added={r.added_count} "
                f"infeasible={len(r.infeasible_ids)} pools={r.pool_human}/"
                f"{r.pool_machine}/{r.pool_unlabeled}"
            )

        result = run_loop(
            state, trainer, sched, seed=seed, readmit=readmit,
            eval_examples=evals, checkpoint=checkpoint,
        )
        rd.save_state(result.state, config)

        ann_dir = rd.path / "annotations"
        ann_dir.mkdir(exist_ok=True)
        for m in result.state.machine:
            save_annotation(ann_dir / f"{m.image_id}.json", m.annotation, beta=m.beta)
        write_csv(rd.path / "history.csv", round_record_rows(result.history))
        render_history_figure(result.history, rd.path / "history.png")
        if isinstance(result.model, ReferenceModel):
            atomic_write_text(
                rd.path / "model.json",
                canonical_dumps(
                    {
                        "prototypes": [list(map(float, row)) for row in result.model.prototypes],
                        "temperature": result.model.temperature,
                        "seed": result.model.seed,
                    }
                ),
            )
        rd.log(f"done: rounds={result.rounds_run}")

    for r in result.history:
        dice = "-" if r.eval_dice is None else f"{r.eval_dice:.4f}"
        print(
            f"round {r.round_index}: added={r.added_count} "
            f"readmitted={len(r.readmitted_ids)} demoted={len(r.demoted_ids)} "
            f"infeasible={len(r.infeasible_ids)} "
            f"pools={r.pool_human}/{r.pool_machine}/{r.pool_unlabeled} dice={dice}"
        )
    reason = "zero admissions" if result.stopped_by_zero_admission else "max rounds"
    print(
        f"stopped after {result.rounds_run} round(s) ({reason}); "
        f"labeled set {result.state.labeled_size()} of "
        f"{result.state.labeled_size() + len(result.state.unlabeled)} images"
    )
    print(f"artifacts in {rd.path}")
    return EXIT_OK


def cmd_coverage(args: argparse.Namespace) -> int:
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    entries = [e for e in manifest.entries if e.gt_path is not None]
    if not entries:
        raise EmptyInput(f"{args.manifest}: no entries carry ground truth")

    from .formats import load_annotation  # local to keep the top imports short

    rows = []
    means = []
    for e in entries:
        ann, _ = load_annotation(manifest_path.parent / e.gt_path)
        pset = load_proposals(manifest_path.parent / e.proposals_path)
        masks = pset.masks()
        nfg = ann.foreground_classes
        try:
            cons = MatchConstraints(
                classes=ann.classes,
                v_lower=(0,) * nfg,
                v_upper=_parse_bounds(args.v_upper, nfg, "--v-upper", len(masks)),
                beta_star=args.beta_star,
            )
        except ValueError as e:
            raise UsageError(str(e)) from None
        cov = oracle_coverage(masks, ann, cons)
        row = {"image_id": e.image_id, "mean_dice": f"{cov.mean_dice:.6f}"}
        for c, d in enumerate(cov.per_class_dice):
            row[f"dice_{c}"] = f"{d:.6f}"
        rows.append(row)
        means.append(cov.mean_dice)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "coverage.csv", rows)
    render_coverage_figure(means, out / "coverage.png")
    print(
        f"coverage over {len(means)} images: mean Dice {float(np.mean(means)):.4f}, "
        f"min {min(means):.4f}, max {max(means):.4f}"
    )
    print(f"wrote {out / 'coverage.csv'} and {out / 'coverage.png'}")
    return EXIT_OK


def cmd_report_selection(args: argparse.Namespace) -> int:
    fidelities = tuple(np.round(np.linspace(0.05, 1.0, args.levels), 3))
    instances = gen_fidelity_sweep(args.seed, fidelities, per_level=args.per_level)
    samples = [
        score_instance(inst, default_sweep_constraints(inst, args.beta_star), f"s{i:04d}")
        for i, inst in enumerate(instances)
    ]
    report = selection_quality_report(samples, buckets=args.buckets)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "samples.csv", [s.as_row() for s in report.samples])
    write_csv(out / "buckets.csv", [b.as_row() for b in report.buckets])
    render_bucket_figure(report, out / "buckets.png")
    for line in report.summary_lines():
        print(line)
    print(f"wrote {out / 'samples.csv'}, {out / 'buckets.csv'}, {out / 'buckets.png'}")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    report = run_verify(
        trials=args.trials,
        seed=args.seed,
        mono_trials=args.mono_trials,
        bound_trials=args.bound_trials,
        epsilon=args.epsilon,
        beta_star=args.beta_star,
    )
    if args.out_dir is not None:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = report.all_rows()
        write_csv(out / "verify.csv", rows)
        write_jsonl(out / "verify.jsonl", rows)
        print(f"wrote {out / 'verify.csv'} and {out / 'verify.jsonl'}")
    for line in report.summary_lines():
        print(line)
    return EXIT_OK if report.ok else EXIT_VERIFY


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskmatch",
        description="Constrained matching of segmentation proposals to probability maps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="match one image's proposals to a probability stack")
    p.add_argument("--proposals", required=True, help="proposal JSON file")
    p.add_argument("--probs", required=True, help="probability stack (.rast)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--v-lower", help="per-class minimum proposals (single value broadcasts)")
    p.add_argument("--v-upper", help="per-class maximum proposals (single value broadcasts)")
    p.add_argument("--beta-star", type=float, default=0.9)
    p.add_argument("--exact-budget", type=int, default=10**6)
    p.add_argument("--greedy", action="store_true", help="skip the exact search")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset on disk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--dims", default="64x64")
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--n-human", type=int, default=20)
    p.add_argument("--n-unlabeled", type=int, default=180)
    p.add_argument("--n-held-out", type=int, default=30)
    p.add_argument("--fidelity", type=float, default=0.5)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("run", help="run the iterative labeling loop over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--eval-manifest", help="fully annotated manifest for per-round Dice")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-rounds", type=int, default=8)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--beta-star", type=float, default=0.9)
    p.add_argument("--exact-budget", type=int, default=10**6)
    p.add_argument("--temperature", type=float, default=0.4)
    p.add_argument("--schedule", help="lo:hi pairs per round, e.g. 1:1,1:2,1:3")
    p.add_argument("--v-lower", help="fixed lower bound for every round (overridden by --schedule)")
    p.add_argument("--v-upper", help="fixed upper bound for every round (overridden by --schedule)")
    p.add_argument("--readmit", action="store_true", help="re-match machine labels every round")
    p.add_argument("--resume", action="store_true", help="continue from state.json in --out-dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("coverage", help="match proposals directly to ground truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--v-upper", help="per-class cap (default: all proposals)")
    p.add_argument("--beta-star", type=float, default=0.9)
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("report-selection", help="selection quality across a fidelity sweep")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--levels", type=int, default=20)
    p.add_argument("--per-level", type=int, default=10)
    p.add_argument("--buckets", type=int, default=10)
    p.add_argument("--beta-star", type=float, default=0.9)
    p.set_defaults(func=cmd_report_selection)

    p = sub.add_parser("verify", help="randomized cross-checks against the reference solver")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--mono-trials", type=int, default=200)
    p.add_argument("--bound-trials", type=int, default=1000)
    p.add_argument("--epsilon", type=float, default=0.02)
    p.add_argument("--beta-star", type=float, default=0.9)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage problems and 0 for --help; fold to contract
        return EXIT_OK if not e.code else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleConstraints as e:
        print(f"error: infeasible constraints: {e}", file=sys.stderr)
        return EXIT_DATA
    except MaskMatchError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except OSError as e:
        where = f": {e.filename}" if e.filename else ""
        print(f"error: {e.strerror or e}{where}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
