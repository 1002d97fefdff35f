"""The multi-round self-training loop.

Each round: train a model on the human- and machine-labeled pools, predict on
every unlabeled image, run the constrained matching against the predictions,
and admit images whose matching score clears beta_star, carrying their
constructed annotations into the next round's training set.  Rounds repeat
until one admits nothing or ``max_rounds`` is hit.

All state transitions are pure (a new DatasetState per round), so a run can be
checkpointed after any round and resumed to a bit-identical continuation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import InfeasibleConstraints, NoLabeledData, UnknownImage
from .masks import BinaryMask
from .matching import (
    AnnotationMap,
    Assignment,
    MatchConstraints,
    build_annotation,
    solve_matching,
)
from .model import LabeledExample, ModelTrainer, TrainedModel, mean_dice


@dataclass(frozen=True)
class UnlabeledExample:
    """An image awaiting labels: features plus its proposal set."""

    image_id: str
    features: np.ndarray
    proposals: tuple[BinaryMask, ...]


@dataclass(frozen=True)
class MachineExample:
    """An admitted image: constructed annotation plus admission provenance.

    Proposals are retained so re-admission mode can re-match in later rounds.
    """

    image_id: str
    features: np.ndarray
    proposals: tuple[BinaryMask, ...]
    annotation: AnnotationMap
    beta: float
    round_added: int


@dataclass(frozen=True)
class RoundRecord:
    """What one round did, in JSON-friendly fields."""

    round_index: int
    v_lower: tuple[int, ...]
    v_upper: tuple[int, ...]
    added_ids: tuple[str, ...]
    readmitted_ids: tuple[str, ...]
    demoted_ids: tuple[str, ...]
    infeasible_ids: tuple[str, ...]
    mean_beta_added: float | None
    pool_human: int
    pool_machine: int
    pool_unlabeled: int
    eval_dice: float | None

    @property
    def added_count(self) -> int:
        return len(self.added_ids)


@dataclass(frozen=True)
class DatasetState:
    """The three image pools plus the per-round history.

    Pools are pairwise disjoint by image id and the round counter is the
    history length; construction enforces both.
    """

    human: tuple[LabeledExample, ...]
    machine: tuple[MachineExample, ...] = ()
    unlabeled: tuple[UnlabeledExample, ...] = ()
    history: tuple[RoundRecord, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "human", tuple(self.human))
        object.__setattr__(self, "machine", tuple(self.machine))
        object.__setattr__(self, "unlabeled", tuple(self.unlabeled))
        object.__setattr__(self, "history", tuple(self.history))
        seen: set[str] = set()
        for pool_name, pool in (
            ("human", self.human),
            ("machine", self.machine),
            ("unlabeled", self.unlabeled),
        ):
            for ex in pool:
                if ex.image_id in seen:
                    raise ValueError(f"image id {ex.image_id!r} duplicated (in {pool_name})")
                seen.add(ex.image_id)

    @property
    def round(self) -> int:
        return len(self.history)

    @property
    def classes(self) -> int:
        if self.human:
            return self.human[0].gt.classes
        if self.machine:
            return self.machine[0].annotation.classes
        raise NoLabeledData("state has no labeled examples to infer the class count from")

    def pool_sizes(self) -> tuple[int, int, int]:
        return (len(self.human), len(self.machine), len(self.unlabeled))

    def labeled_size(self) -> int:
        return len(self.human) + len(self.machine)


def _broadcast(v: int | Sequence[int], n: int) -> tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * n
    return tuple(int(x) for x in v)


@dataclass(frozen=True)
class RoundSchedule:
    """Per-round RoI bounds plus the loop-wide knobs.

    Each entry is (v_lower, v_upper); an int applies to every foreground
    class, a sequence gives per-class bounds.  Rounds beyond the last entry
    reuse it.
    """

    entries: tuple[tuple[int | tuple[int, ...], int | tuple[int, ...]], ...] = (
        (1, 1),
        (1, 2),
        (1, 3),
    )
    max_rounds: int = 8
    lam: float = 1.0
    beta_star: float = 0.9
    exact_budget: int = 10**6

    def __post_init__(self) -> None:
        if not self.entries:
            raise ValueError("schedule needs at least one entry")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.lam < 0.0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 <= self.beta_star <= 1.0:
            raise ValueError(f"beta_star must be in [0,1], got {self.beta_star}")

    def constraints_for(self, round_index: int, classes: int) -> MatchConstraints:
        lo, hi = self.entries[min(round_index, len(self.entries) - 1)]
        nfg = classes - 1
        return MatchConstraints(
            classes=classes,
            v_lower=_broadcast(lo, nfg),
            v_upper=_broadcast(hi, nfg),
            beta_star=self.beta_star,
            exact_budget=self.exact_budget,
        )


@dataclass(frozen=True)
class MatchCandidate:
    """One matched unlabeled image, ready for the admission decision."""

    image_id: str
    assignment: Assignment
    annotation: AnnotationMap

    @property
    def beta(self) -> float:
        return self.assignment.beta


def expand_labeled_set(
    state: DatasetState,
    candidates: Sequence[MatchCandidate],
    beta_star: float,
) -> tuple[MatchCandidate, ...]:
    """Filter candidates down to the admissions: beta >= beta_star.

    Every candidate must name a distinct image currently in the unlabeled
    pool; anything else is an UnknownImage error, because admitting it would
    corrupt pool disjointness.
    """
    unlabeled_ids = {u.image_id for u in state.unlabeled}
    seen: set[str] = set()
    admitted = []
    for cand in candidates:
        if cand.image_id in seen:
            raise UnknownImage(f"candidate {cand.image_id!r} appears more than once")
        seen.add(cand.image_id)
        if cand.image_id not in unlabeled_ids:
            raise UnknownImage(f"candidate {cand.image_id!r} is not in the unlabeled pool")
        if cand.beta >= beta_star:
            admitted.append(cand)
    return tuple(admitted)


def round_seed(seed: int, round_index: int) -> int:
    """Per-round training seed derived from the run seed."""
    return int(np.random.SeedSequence(seed, spawn_key=(round_index,)).generate_state(1)[0])


def run_round(
    state: DatasetState,
    trainer: ModelTrainer,
    sched: RoundSchedule,
    seed: int = 0,
    readmit: bool = False,
    eval_examples: Sequence[LabeledExample] | None = None,
) -> tuple[DatasetState, RoundRecord, TrainedModel]:
    """Train, predict, match, and expand once.

    With ``readmit`` the machine pool is re-matched under the current round's
    model and constraints after training: entries that still clear beta_star
    stay (with refreshed annotations), the rest fall back to unlabeled.
    Images whose proposal count cannot satisfy v_lower this round are skipped
    and recorded as infeasible rather than failing the round.
    """
    if not state.human:
        raise NoLabeledData("run_round requires at least one human-labeled example")
    rnd = state.round
    cons = sched.constraints_for(rnd, state.classes)

    machine_as_labeled = [
        LabeledExample(m.image_id, m.features, m.annotation) for m in state.machine
    ]
    model = trainer.train(
        human=state.human,
        machine=machine_as_labeled,
        lam=sched.lam,
        seed=round_seed(seed, rnd),
    )

    prev_machine_ids = {m.image_id for m in state.machine}
    pool = list(state.unlabeled)
    if readmit:
        pool += [UnlabeledExample(m.image_id, m.features, m.proposals) for m in state.machine]
        state = DatasetState(
            human=state.human, machine=(), unlabeled=tuple(pool), history=state.history
        )

    candidates: list[MatchCandidate] = []
    infeasible: list[str] = []
    for u in pool:
        probs = model.predict(u.features)
        try:
            assignment = solve_matching(u.proposals, probs, cons)
        except InfeasibleConstraints:
            infeasible.append(u.image_id)
            continue
        annotation = build_annotation(u.proposals, assignment, probs.shape, image_id=u.image_id)
        candidates.append(MatchCandidate(u.image_id, assignment, annotation))

    admitted = expand_labeled_set(state, candidates, sched.beta_star)
    admitted_ids = {c.image_id for c in admitted}
    by_id = {u.image_id: u for u in pool}
    new_machine = tuple(
        MachineExample(
            image_id=c.image_id,
            features=by_id[c.image_id].features,
            proposals=by_id[c.image_id].proposals,
            annotation=c.annotation,
            beta=c.beta,
            round_added=rnd,
        )
        for c in admitted
    )
    if not readmit:
        new_machine = state.machine + new_machine
    new_unlabeled = tuple(u for u in pool if u.image_id not in admitted_ids)

    added_ids = tuple(c.image_id for c in admitted if c.image_id not in prev_machine_ids)
    readmitted_ids = tuple(c.image_id for c in admitted if c.image_id in prev_machine_ids)
    demoted_ids = tuple(sorted(prev_machine_ids - admitted_ids)) if readmit else ()
    new_betas = [c.beta for c in admitted if c.image_id not in prev_machine_ids]
    record = RoundRecord(
        round_index=rnd,
        v_lower=cons.v_lower,
        v_upper=cons.v_upper,
        added_ids=added_ids,
        readmitted_ids=readmitted_ids,
        demoted_ids=demoted_ids,
        infeasible_ids=tuple(infeasible),
        mean_beta_added=float(np.mean(new_betas)) if new_betas else None,
        pool_human=len(state.human),
        pool_machine=len(new_machine),
        pool_unlabeled=len(new_unlabeled),
        eval_dice=mean_dice(model, eval_examples) if eval_examples else None,
    )
    new_state = DatasetState(
        human=state.human,
        machine=new_machine,
        unlabeled=new_unlabeled,
        history=state.history + (record,),
    )
    return new_state, record, model


@dataclass(frozen=True)
class LoopResult:
    state: DatasetState
    model: TrainedModel
    stopped_by_zero_admission: bool

    @property
    def history(self) -> tuple[RoundRecord, ...]:
        return self.state.history

    @property
    def rounds_run(self) -> int:
        return len(self.state.history)


def _train_on_state(
    state: DatasetState, trainer: ModelTrainer, sched: RoundSchedule, seed: int
) -> TrainedModel:
    machine_as_labeled = [
        LabeledExample(m.image_id, m.features, m.annotation) for m in state.machine
    ]
    return trainer.train(
        human=state.human,
        machine=machine_as_labeled,
        lam=sched.lam,
        seed=round_seed(seed, state.round),
    )


def run_loop(
    state: DatasetState,
    trainer: ModelTrainer,
    sched: RoundSchedule,
    seed: int = 0,
    readmit: bool = False,
    eval_examples: Sequence[LabeledExample] | None = None,
    checkpoint: Callable[[DatasetState], None] | None = None,
) -> LoopResult:
    """Run rounds until one admits nothing or max_rounds is reached.

    Accepts a state with existing history (a resumed run) and continues from
    the next round; the result is identical to an uninterrupted run because
    each round depends only on the state, the schedule, and the run seed.
    The returned model has seen every admitted example: when the loop ends on
    a round that still admitted images, a final training pass is performed.
    """
    model: TrainedModel | None = None
    while state.round < sched.max_rounds:
        if state.history and state.history[-1].added_count == 0:
            break  # a resumed run that had already terminated
        state, record, model = run_round(
            state, trainer, sched, seed=seed, readmit=readmit, eval_examples=eval_examples
        )
        if checkpoint is not None:
            checkpoint(state)
        if record.added_count == 0:
            return LoopResult(state=state, model=model, stopped_by_zero_admission=True)
    if model is None or (state.history and state.history[-1].added_count > 0):
        model = _train_on_state(state, trainer, sched, seed)
    stopped = bool(state.history) and state.history[-1].added_count == 0
    return LoopResult(state=state, model=model, stopped_by_zero_admission=stopped)
