"""Proposal-to-prediction matching and self-training for segmentation.

The package matches externally generated segmentation proposals against
per-class probability maps under region-count constraints, scores the match,
constructs machine annotations from accepted matches, and iterates the
train/predict/match/expand loop with a pluggable model.
"""

from .errors import (
    ContractViolation,
    DegenerateClass,
    DimensionMismatch,
    EmptyInput,
    GenerationFailed,
    InfeasibleConstraints,
    MalformedAnnotation,
    MalformedManifest,
    MalformedProposal,
    MalformedRaster,
    MalformedRecord,
    MalformedRle,
    MaskMatchError,
    NoLabeledData,
    PreconditionUnmet,
    RunLocked,
    TooLarge,
    UnknownImage,
)
from .masks import BinaryMask, RleMask, clip_union, rle_decode, rle_encode, validate_rle
from .matching import (
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
from .metrics import Metric, binary_overlap, overlap_score, soft_iou
from .oracle import (
    BoundReport,
    CoverageResult,
    CoverReport,
    brute_force_solve,
    check_cover,
    check_rejection_bound,
    oracle_coverage,
)
from .probs import ProbStack, StackReport, validate_prob_stack
from .synth import (
    DatasetParams,
    SyntheticDataset,
    SyntheticImage,
    SyntheticInstance,
    SynthParams,
    gen_fidelity_sweep,
    gen_synthetic_dataset,
    gen_synthetic_instance,
)
from .model import (
    LabeledExample,
    ModelTrainer,
    ReferenceModel,
    ReferenceTrainer,
    TrainedModel,
    mean_dice,
)
from .loop import (
    DatasetState,
    LoopResult,
    MachineExample,
    MatchCandidate,
    RoundRecord,
    RoundSchedule,
    UnlabeledExample,
    expand_labeled_set,
    run_loop,
    run_round,
)
from .benchmark import BenchmarkResult, run_benchmark
from .verify import VerifyReport, run_verify
from .reports import (
    SelectionQualityReport,
    SelectionSample,
    score_instance,
    selection_quality_report,
)
from .formats import (
    Manifest,
    ManifestEntry,
    ProposalRecord,
    ProposalSet,
    RunDir,
    load_annotation,
    load_manifest,
    load_proposals,
    load_raster,
    proposals_from_masks,
    save_annotation,
    save_manifest,
    save_proposals,
    save_raster,
    write_dataset,
)

__version__ = "0.1.0"
