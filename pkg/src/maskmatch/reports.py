"""Selection-quality analysis, delimited tables, and rendered figures.

The central question answered here: does the matching score beta actually
rank annotation quality?  Samples are bucketed by beta percentile and each
bucket reports mean IoU against ground truth, computed two ways (constructed
annotation vs GT, and raw prediction vs GT) since either reading is
defensible.  Figures are rendered headlessly next to every table so a run
directory is inspectable at a glance.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")  # headless: render straight to files

import matplotlib.pyplot as plt
import numpy as np
from scipy.stats import spearmanr

from .errors import EmptyInput
from .loop import RoundRecord
from .matching import CaseLabel, MatchConstraints, build_annotation, classify_case, solve_matching
from .metrics import Metric, binary_overlap, soft_iou
from .synth import SyntheticInstance

_FIG_DPI = 100
_PNG_METADATA = {"Software": "maskmatch"}  # keep PNG bytes version-independent


@dataclass(frozen=True)
class SelectionSample:
    """One matched image scored against its ground truth."""

    sample_id: str
    beta: float
    case1: bool
    iou_annotation: float
    iou_prediction: float

    def as_row(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "beta": self.beta,
            "case": "case1" if self.case1 else "case2",
            "iou_annotation": self.iou_annotation,
            "iou_prediction": self.iou_prediction,
        }


def score_instance(
    inst: SyntheticInstance, cons: MatchConstraints, sample_id: str | None = None
) -> SelectionSample:
    """Match one instance and score the outcome against its ground truth."""
    assignment = solve_matching(inst.proposals, inst.probs, cons)
    annotation = build_annotation(inst.proposals, assignment, inst.dims)
    nfg = inst.gt.foreground_classes
    iou_ann = float(
        np.mean(
            [
                binary_overlap(annotation.class_mask(c), inst.gt.class_mask(c), Metric.BINARY_IOU)
                for c in range(nfg)
            ]
        )
    )
    iou_pred = float(
        np.mean([soft_iou(inst.probs.class_map(c), inst.gt.class_mask(c)) for c in range(nfg)])
    )
    return SelectionSample(
        sample_id=sample_id if sample_id is not None else f"seed-{inst.seed}",
        beta=assignment.beta,
        case1=classify_case(assignment, cons) is CaseLabel.CASE1,
        iou_annotation=iou_ann,
        iou_prediction=iou_pred,
    )


def default_sweep_constraints(inst: SyntheticInstance, beta_star: float = 0.9) -> MatchConstraints:
    """Bounds that make the instance's fragment cover feasible."""
    counts = inst.fragment_counts()
    return MatchConstraints(
        classes=inst.gt.classes,
        v_lower=(0,) * inst.gt.foreground_classes,
        v_upper=tuple(max(c, 1) for c in counts),
        beta_star=beta_star,
    )


@dataclass(frozen=True)
class BucketRow:
    rank: int  # 1 = highest-beta bucket
    count: int
    mean_beta: float
    mean_iou_annotation: float
    mean_iou_prediction: float

    def as_row(self) -> dict:
        return {
            "rank": self.rank,
            "count": self.count,
            "mean_beta": self.mean_beta,
            "mean_iou_annotation": self.mean_iou_annotation,
            "mean_iou_prediction": self.mean_iou_prediction,
        }


@dataclass(frozen=True)
class SelectionQualityReport:
    """Percentile-bucket table plus the Case-1/Case-2 quality gap."""

    buckets: tuple[BucketRow, ...]
    spearman_rank_iou: float
    case1_mean_iou: float | None
    case2_mean_iou: float | None
    samples: tuple[SelectionSample, ...]

    @property
    def case_gap(self) -> float | None:
        if self.case1_mean_iou is None or self.case2_mean_iou is None:
            return None
        return self.case1_mean_iou - self.case2_mean_iou

    def summary_lines(self) -> list[str]:
        lines = []
        for b in self.buckets:
            lines.append(
                f"bucket {b.rank:2d}: n={b.count:4d} mean_beta={b.mean_beta:.4f} "
                f"iou_annotation={b.mean_iou_annotation:.4f} "
                f"iou_prediction={b.mean_iou_prediction:.4f}"
            )
        lines.append(f"spearman(rank, iou_annotation) = {self.spearman_rank_iou:+.4f}")
        if self.case_gap is not None:
            lines.append(
                f"case1 mean iou {self.case1_mean_iou:.4f}, "
                f"case2 mean iou {self.case2_mean_iou:.4f}, gap {self.case_gap:+.4f}"
            )
        return lines


def selection_quality_report(
    samples: Sequence[SelectionSample], buckets: int = 10
) -> SelectionQualityReport:
    """Bucket samples by beta percentile and report per-bucket mean IoU.

    Sorting is by beta descending with original order as the tie-break, so
    the report is deterministic for a fixed sample sequence.
    """
    if not samples:
        raise EmptyInput("selection quality needs at least one sample")
    if buckets < 1:
        raise ValueError("bucket count must be >= 1")
    order = sorted(range(len(samples)), key=lambda i: (-samples[i].beta, i))
    ranked = [samples[i] for i in order]
    rows = []
    for rank, chunk in enumerate(np.array_split(np.arange(len(ranked)), buckets), start=1):
        if chunk.size == 0:
            continue
        members = [ranked[i] for i in chunk]
        rows.append(
            BucketRow(
                rank=rank,
                count=len(members),
                mean_beta=float(np.mean([s.beta for s in members])),
                mean_iou_annotation=float(np.mean([s.iou_annotation for s in members])),
                mean_iou_prediction=float(np.mean([s.iou_prediction for s in members])),
            )
        )
    if len(rows) > 1:
        # Higher bucket quality should come with lower (better) rank numbers.
        corr = spearmanr(
            [-b.rank for b in rows], [b.mean_iou_annotation for b in rows]
        ).statistic
        spearman = float(corr) if np.isfinite(corr) else 0.0
    else:
        spearman = 0.0
    case1 = [s.iou_annotation for s in samples if s.case1]
    case2 = [s.iou_annotation for s in samples if not s.case1]
    return SelectionQualityReport(
        buckets=tuple(rows),
        spearman_rank_iou=spearman,
        case1_mean_iou=float(np.mean(case1)) if case1 else None,
        case2_mean_iou=float(np.mean(case2)) if case2 else None,
        samples=tuple(samples),
    )


# --- delimited output -------------------------------------------------------


def write_csv(path: str | Path, rows: Iterable[dict], fieldnames: Sequence[str] | None = None) -> None:
    """Write rows as CSV with a stable column order and LF newlines."""
    rows = list(rows)
    if fieldnames is None:
        fieldnames = []
        for row in rows:
            for key in row:
                if key not in fieldnames:
                    fieldnames.append(key)
    with open(path, "w", newline="\n") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    """One canonical JSON object per line."""
    with open(path, "w", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def round_record_rows(history: Sequence[RoundRecord]) -> list[dict]:
    rows = []
    for r in history:
        rows.append(
            {
                "round": r.round_index,
                "v_lower": ";".join(str(v) for v in r.v_lower),
                "v_upper": ";".join(str(v) for v in r.v_upper),
                "added": r.added_count,
                "readmitted": len(r.readmitted_ids),
                "demoted": len(r.demoted_ids),
                "infeasible": len(r.infeasible_ids),
                "added_ids": ";".join(r.added_ids),
                "readmitted_ids": ";".join(r.readmitted_ids),
                "demoted_ids": ";".join(r.demoted_ids),
                "infeasible_ids": ";".join(r.infeasible_ids),
                "mean_beta_added": "" if r.mean_beta_added is None else r.mean_beta_added,
                "pool_human": r.pool_human,
                "pool_machine": r.pool_machine,
                "pool_unlabeled": r.pool_unlabeled,
                "eval_dice": "" if r.eval_dice is None else r.eval_dice,
            }
        )
    return rows


# --- figures ----------------------------------------------------------------


def _save_figure(fig, path: str | Path) -> None:
    fig.savefig(path, dpi=_FIG_DPI, metadata=_PNG_METADATA)
    plt.close(fig)


def render_bucket_figure(report: SelectionQualityReport, path: str | Path) -> None:
    """Bar chart: mean IoU per beta-percentile bucket, best bucket first."""
    ranks = [b.rank for b in report.buckets]
    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.4
    ax.bar(
        [r - width / 2 for r in ranks],
        [b.mean_iou_annotation for b in report.buckets],
        width=width,
        label="annotation vs GT",
    )
    ax.bar(
        [r + width / 2 for r in ranks],
        [b.mean_iou_prediction for b in report.buckets],
        width=width,
        label="prediction vs GT",
    )
    ax.set_xlabel("beta percentile bucket (1 = highest beta)")
    ax.set_ylabel("mean IoU")
    ax.set_xticks(ranks)
    ax.set_ylim(0, 1.05)
    ax.legend(loc="lower left")
    ax.set_title("Does the matching score rank annotation quality?")
    fig.tight_layout()
    _save_figure(fig, path)


def render_history_figure(history: Sequence[RoundRecord], path: str | Path) -> None:
    """Admissions per round (bars) and held-out Dice per round (line)."""
    rounds = [r.round_index for r in history]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(rounds, [r.added_count for r in history], color="tab:blue", label="admitted")
    ax.set_xlabel("round")
    ax.set_ylabel("images admitted")
    ax.set_xticks(rounds)
    dice = [(r.round_index, r.eval_dice) for r in history if r.eval_dice is not None]
    if dice:
        ax2 = ax.twinx()
        ax2.plot(*zip(*dice), color="tab:red", marker="o", label="held-out Dice")
        ax2.set_ylabel("held-out Dice")
        ax2.set_ylim(0, 1.05)
    fig.legend(loc="upper right")
    fig.tight_layout()
    _save_figure(fig, path)


def render_coverage_figure(mean_dices: Sequence[float], path: str | Path) -> None:
    """Histogram of per-image mean Dice from matching proposals to GT."""
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.hist(list(mean_dices), bins=20, range=(0.0, 1.0), color="tab:green")
    ax.set_xlabel("per-image mean Dice (proposals matched to GT)")
    ax.set_ylabel("images")
    ax.set_title("Proposal coverage of ground truth")
    fig.tight_layout()
    _save_figure(fig, path)
