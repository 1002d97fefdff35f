"""Bit-exact file formats, dataset manifests, and resumable run persistence.

One binary container (RAST) holds both feature rasters and probability
stacks; everything else is canonical JSON (sorted keys, two-space indent, LF
newlines) so artifacts are byte-stable across runs.  Timestamps live only in
the run log sidecar.  All writes go through a temp-file-and-rename so readers
never observe a partial file.
"""

from __future__ import annotations

import json
import os
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    MalformedAnnotation,
    MalformedManifest,
    MalformedProposal,
    MalformedRaster,
    MalformedRecord,
    MalformedRle,
    RunLocked,
)
from .loop import DatasetState, MachineExample, RoundRecord, RoundSchedule, UnlabeledExample
from .masks import BinaryMask, RleMask, rle_decode, rle_encode
from .matching import AnnotationMap, Assignment
from .model import LabeledExample

RASTER_MAGIC = b"RAST"
RASTER_VERSION = 1
_HEADER = struct.Struct("<4sHIII")  # magic, version, channels, height, width


# --- low-level helpers -------------------------------------------------------


def canonical_dumps(obj) -> str:
    """Canonical JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see partials."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path: str | Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _load_json(path: str | Path, exc_type) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as e:
        raise exc_type(f"{path}: not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise exc_type(f"{path}: top level must be an object, got {type(doc).__name__}")
    return doc


def _field(doc: dict, key: str, kind, where: str, exc_type):
    if key not in doc:
        raise exc_type(f"{where}: missing field {key!r}")
    value = doc[key]
    if kind is float and isinstance(value, int):
        value = float(value)
    if not isinstance(value, kind):
        raise exc_type(
            f"{where}.{key}: expected {getattr(kind, '__name__', kind)}, "
            f"got {type(value).__name__}"
        )
    return value


# --- RAST raster container ---------------------------------------------------


def save_raster(path: str | Path, array: np.ndarray) -> None:
    """Write a (C, h, w) float raster as little-endian float32."""
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"raster must be (C, h, w), got shape {arr.shape}")
    c, h, w = arr.shape
    header = _HEADER.pack(RASTER_MAGIC, RASTER_VERSION, c, h, w)
    atomic_write_bytes(path, header + arr.tobytes())


def load_raster(path: str | Path) -> np.ndarray:
    """Read a RAST file back to (C, h, w) float32, with positional diagnostics."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEADER.size:
        raise MalformedRaster(
            f"{path}: header truncated at offset {len(data)} ({_HEADER.size} bytes required)"
        )
    magic, version, c, h, w = _HEADER.unpack_from(data, 0)
    if magic != RASTER_MAGIC:
        raise MalformedRaster(f"{path}: bad magic {magic!r} at offset 0")
    if version != RASTER_VERSION:
        raise MalformedRaster(f"{path}: unsupported version {version} at offset 4")
    if min(c, h, w) == 0:
        raise MalformedRaster(
            f"{path}: zero dimension (channels={c}, height={h}, width={w}) at offset 6"
        )
    expected = _HEADER.size + 4 * c * h * w
    if len(data) < expected:
        raise MalformedRaster(
            f"{path}: payload truncated at offset {len(data)}: "
            f"{len(data) - _HEADER.size} of {expected - _HEADER.size} payload bytes"
        )
    if len(data) > expected:
        raise MalformedRaster(
            f"{path}: {len(data) - expected} trailing bytes after payload at offset {expected}"
        )
    flat = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    return flat.reshape((c, h, w))


# --- proposal files ----------------------------------------------------------


@dataclass(frozen=True)
class ProposalRecord:
    proposal_id: str
    rle: RleMask
    source: dict

    def mask(self) -> BinaryMask:
        return rle_decode(self.rle)


@dataclass(frozen=True)
class ProposalSet:
    image_id: str
    size: tuple[int, int]
    proposals: tuple[ProposalRecord, ...]
    generator: dict

    def masks(self) -> tuple[BinaryMask, ...]:
        return tuple(p.mask() for p in self.proposals)


def proposals_from_masks(
    image_id: str,
    masks: Sequence[BinaryMask],
    sources: Sequence[dict] | None = None,
    generator: dict | None = None,
) -> ProposalSet:
    if not masks:
        raise ValueError("a proposal set needs at least one mask")
    size = masks[0].shape
    records = tuple(
        ProposalRecord(
            proposal_id=f"{image_id}/p{i:03d}",
            rle=rle_encode(m),
            source=dict(sources[i]) if sources else {},
        )
        for i, m in enumerate(masks)
    )
    return ProposalSet(image_id, size, records, dict(generator or {}))


def save_proposals(path: str | Path, pset: ProposalSet) -> None:
    doc = {
        "image_id": pset.image_id,
        "size": list(pset.size),
        "generator": pset.generator,
        "proposals": [
            {"id": p.proposal_id, "counts": list(p.rle.counts), "source": p.source}
            for p in pset.proposals
        ],
    }
    atomic_write_text(path, canonical_dumps(doc))


def load_proposals(path: str | Path) -> ProposalSet:
    doc = _load_json(path, MalformedProposal)
    where = str(path)
    image_id = _field(doc, "image_id", str, where, MalformedProposal)
    size = _field(doc, "size", list, where, MalformedProposal)
    if len(size) != 2 or not all(isinstance(v, int) and v >= 1 for v in size):
        raise MalformedProposal(f"{where}.size: expected [height, width] >= 1, got {size!r}")
    raw = _field(doc, "proposals", list, where, MalformedProposal)
    if not raw:
        raise MalformedProposal(f"{where}.proposals: must not be empty")
    generator = doc.get("generator", {})
    if not isinstance(generator, dict):
        raise MalformedProposal(f"{where}.generator: expected object")
    records = []
    seen: set[str] = set()
    for i, entry in enumerate(raw):
        whe = f"{where}.proposals[{i}]"
        if not isinstance(entry, dict):
            raise MalformedProposal(f"{whe}: expected object")
        pid = _field(entry, "id", str, whe, MalformedProposal)
        if pid in seen:
            raise MalformedProposal(f"{whe}: duplicate proposal id {pid!r}")
        seen.add(pid)
        counts = _field(entry, "counts", list, whe, MalformedProposal)
        source = entry.get("source", {})
        if not isinstance(source, dict):
            raise MalformedProposal(f"{whe}.source: expected object")
        try:
            rle = RleMask(size=(size[0], size[1]), counts=tuple(counts))
        except (MalformedRle, TypeError, ValueError) as e:
            raise MalformedProposal(f"{whe} (id {pid!r}): bad RLE: {e}") from e
        records.append(ProposalRecord(pid, rle, source))
    return ProposalSet(image_id, (size[0], size[1]), tuple(records), generator)


# --- annotations -------------------------------------------------------------


def annotation_to_doc(ann: AnnotationMap, beta: float | None = None) -> dict:
    h, w = ann.shape
    doc = {
        "image_id": ann.image_id,
        "classes": ann.classes,
        "size": [h, w],
        "conflict_pixels": ann.conflict_pixels,
        "class_maps": [list(rle_encode(ann.class_mask(c)).counts) for c in range(ann.foreground_classes)],
    }
    if beta is not None:
        doc["beta"] = beta
    return doc


def annotation_from_doc(doc: dict, where: str = "annotation") -> tuple[AnnotationMap, float | None]:
    classes = _field(doc, "classes", int, where, MalformedAnnotation)
    size = _field(doc, "size", list, where, MalformedAnnotation)
    if len(size) != 2 or not all(isinstance(v, int) and v >= 1 for v in size):
        raise MalformedAnnotation(f"{where}.size: expected [height, width] >= 1, got {size!r}")
    maps = _field(doc, "class_maps", list, where, MalformedAnnotation)
    if classes < 2 or len(maps) != classes - 1:
        raise MalformedAnnotation(
            f"{where}: classes={classes} requires {classes - 1} class maps, got {len(maps)}"
        )
    decoded = []
    for c, counts in enumerate(maps):
        try:
            decoded.append(rle_decode(RleMask(size=(size[0], size[1]), counts=tuple(counts))).bits)
        except (MalformedRle, TypeError, ValueError) as e:
            raise MalformedAnnotation(f"{where}.class_maps[{c}]: bad RLE: {e}") from e
    image_id = doc.get("image_id")
    if image_id is not None and not isinstance(image_id, str):
        raise MalformedAnnotation(f"{where}.image_id: expected string or null")
    beta = doc.get("beta")
    if beta is not None and not isinstance(beta, (int, float)):
        raise MalformedAnnotation(f"{where}.beta: expected number")
    ann = AnnotationMap(np.stack(decoded), image_id=image_id)
    return ann, None if beta is None else float(beta)


def save_annotation(path: str | Path, ann: AnnotationMap, beta: float | None = None) -> None:
    atomic_write_text(path, canonical_dumps(annotation_to_doc(ann, beta)))


def load_annotation(path: str | Path) -> tuple[AnnotationMap, float | None]:
    return annotation_from_doc(_load_json(path, MalformedAnnotation), str(path))


# --- assignments -------------------------------------------------------------


def assignment_to_doc(a: Assignment) -> dict:
    return {
        "selections": [list(s) for s in a.selections],
        "per_class_iou": list(a.per_class_iou),
        "beta": a.beta,
        "exact": a.exact,
    }


def assignment_from_doc(doc: dict, where: str = "assignment") -> Assignment:
    sels = _field(doc, "selections", list, where, MalformedRecord)
    ious = _field(doc, "per_class_iou", list, where, MalformedRecord)
    exact = _field(doc, "exact", bool, where, MalformedRecord)
    try:
        return Assignment(
            selections=tuple(tuple(int(i) for i in s) for s in sels),
            per_class_iou=tuple(float(x) for x in ious),
            exact=exact,
        )
    except (TypeError, ValueError) as e:
        raise MalformedRecord(f"{where}: {e}") from e


def save_assignment(path: str | Path, a: Assignment) -> None:
    atomic_write_text(path, canonical_dumps(assignment_to_doc(a)))


def load_assignment(path: str | Path) -> Assignment:
    return assignment_from_doc(_load_json(path, MalformedRecord), str(path))


# --- manifests ---------------------------------------------------------------

_POOLS = ("labeled", "unlabeled")


@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    features_path: str
    proposals_path: str
    gt_path: str | None
    pool: str


@dataclass(frozen=True)
class Manifest:
    entries: tuple[ManifestEntry, ...]

    def by_pool(self, pool: str) -> tuple[ManifestEntry, ...]:
        return tuple(e for e in self.entries if e.pool == pool)


def save_manifest(path: str | Path, manifest: Manifest) -> None:
    doc = {
        "images": [
            {
                "id": e.image_id,
                "features": e.features_path,
                "proposals": e.proposals_path,
                **({"gt": e.gt_path} if e.gt_path is not None else {}),
                "pool": e.pool,
            }
            for e in manifest.entries
        ]
    }
    atomic_write_text(path, canonical_dumps(doc))


def load_manifest(path: str | Path) -> Manifest:
    doc = _load_json(path, MalformedManifest)
    where = str(path)
    images = _field(doc, "images", list, where, MalformedManifest)
    entries = []
    seen: set[str] = set()
    for i, entry in enumerate(images):
        whe = f"{where}.images[{i}]"
        if not isinstance(entry, dict):
            raise MalformedManifest(f"{whe}: expected object")
        image_id = _field(entry, "id", str, whe, MalformedManifest)
        if image_id in seen:
            raise MalformedManifest(f"{whe}.id: duplicate image id {image_id!r}")
        seen.add(image_id)
        pool = _field(entry, "pool", str, whe, MalformedManifest)
        if pool not in _POOLS:
            raise MalformedManifest(f"{whe}.pool: expected one of {_POOLS}, got {pool!r}")
        gt = entry.get("gt")
        if gt is not None and not isinstance(gt, str):
            raise MalformedManifest(f"{whe}.gt: expected string path")
        if pool == "labeled" and gt is None:
            raise MalformedManifest(f"{whe}: labeled entry {image_id!r} must carry a gt path")
        entries.append(
            ManifestEntry(
                image_id=image_id,
                features_path=_field(entry, "features", str, whe, MalformedManifest),
                proposals_path=_field(entry, "proposals", str, whe, MalformedManifest),
                gt_path=gt,
                pool=pool,
            )
        )
    return Manifest(tuple(entries))


def load_examples(
    manifest: Manifest, base_dir: str | Path
) -> tuple[list[LabeledExample], list[UnlabeledExample]]:
    """Materialize manifest entries into in-memory pool examples.

    Relative paths resolve against ``base_dir`` (normally the manifest's
    directory).  Labeled entries become human examples; unlabeled entries
    carry their proposal masks.
    """
    base = Path(base_dir)
    human: list[LabeledExample] = []
    unlabeled: list[UnlabeledExample] = []
    for e in manifest.entries:
        features = load_raster(base / e.features_path)
        if e.pool == "labeled":
            ann, _ = load_annotation(base / e.gt_path)  # type: ignore[arg-type]
            ann = AnnotationMap(ann.class_maps, image_id=e.image_id)
            human.append(LabeledExample(e.image_id, features, ann))
        else:
            pset = load_proposals(base / e.proposals_path)
            unlabeled.append(UnlabeledExample(e.image_id, features, pset.masks()))
    return human, unlabeled


def load_eval_examples(manifest: Manifest, base_dir: str | Path) -> list[LabeledExample]:
    """Every entry with ground truth becomes an evaluation example."""
    base = Path(base_dir)
    out = []
    for e in manifest.entries:
        if e.gt_path is None:
            raise MalformedManifest(
                f"evaluation manifest entry {e.image_id!r} must carry a gt path"
            )
        features = load_raster(base / e.features_path)
        ann, _ = load_annotation(base / e.gt_path)
        out.append(LabeledExample(e.image_id, features, AnnotationMap(ann.class_maps, image_id=e.image_id)))
    return out


# --- round records and loop state --------------------------------------------


def record_to_doc(r: RoundRecord) -> dict:
    return {
        "round_index": r.round_index,
        "v_lower": list(r.v_lower),
        "v_upper": list(r.v_upper),
        "added_ids": list(r.added_ids),
        "readmitted_ids": list(r.readmitted_ids),
        "demoted_ids": list(r.demoted_ids),
        "infeasible_ids": list(r.infeasible_ids),
        "mean_beta_added": r.mean_beta_added,
        "pool_human": r.pool_human,
        "pool_machine": r.pool_machine,
        "pool_unlabeled": r.pool_unlabeled,
        "eval_dice": r.eval_dice,
    }


def record_from_doc(doc: dict, where: str = "record") -> RoundRecord:
    try:
        return RoundRecord(
            round_index=_field(doc, "round_index", int, where, MalformedRecord),
            v_lower=tuple(_field(doc, "v_lower", list, where, MalformedRecord)),
            v_upper=tuple(_field(doc, "v_upper", list, where, MalformedRecord)),
            added_ids=tuple(_field(doc, "added_ids", list, where, MalformedRecord)),
            readmitted_ids=tuple(_field(doc, "readmitted_ids", list, where, MalformedRecord)),
            demoted_ids=tuple(_field(doc, "demoted_ids", list, where, MalformedRecord)),
            infeasible_ids=tuple(_field(doc, "infeasible_ids", list, where, MalformedRecord)),
            mean_beta_added=doc.get("mean_beta_added"),
            pool_human=_field(doc, "pool_human", int, where, MalformedRecord),
            pool_machine=_field(doc, "pool_machine", int, where, MalformedRecord),
            pool_unlabeled=_field(doc, "pool_unlabeled", int, where, MalformedRecord),
            eval_dice=doc.get("eval_dice"),
        )
    except (TypeError, ValueError) as e:
        raise MalformedRecord(f"{where}: {e}") from e


def schedule_to_doc(sched: RoundSchedule) -> dict:
    return {
        "entries": [list(e) for e in sched.entries],
        "max_rounds": sched.max_rounds,
        "lam": sched.lam,
        "beta_star": sched.beta_star,
        "exact_budget": sched.exact_budget,
    }


def schedule_from_doc(doc: dict, where: str = "schedule") -> RoundSchedule:
    entries = _field(doc, "entries", list, where, MalformedRecord)
    try:
        return RoundSchedule(
            entries=tuple((int(lo), int(hi)) for lo, hi in entries),
            max_rounds=_field(doc, "max_rounds", int, where, MalformedRecord),
            lam=_field(doc, "lam", float, where, MalformedRecord),
            beta_star=_field(doc, "beta_star", float, where, MalformedRecord),
            exact_budget=_field(doc, "exact_budget", int, where, MalformedRecord),
        )
    except (TypeError, ValueError) as e:
        raise MalformedRecord(f"{where}: {e}") from e


def state_to_doc(state: DatasetState, config: dict) -> dict:
    """Serializable snapshot: pools by id, machine annotations inline."""
    return {
        "config": config,
        "human_ids": [ex.image_id for ex in state.human],
        "unlabeled_ids": [ex.image_id for ex in state.unlabeled],
        "machine": [
            {
                "image_id": m.image_id,
                "beta": m.beta,
                "round_added": m.round_added,
                "annotation": annotation_to_doc(m.annotation),
            }
            for m in state.machine
        ],
        "history": [record_to_doc(r) for r in state.history],
    }


def state_from_doc(
    doc: dict,
    human: Sequence[LabeledExample],
    unlabeled: Sequence[UnlabeledExample],
    where: str = "state",
) -> tuple[DatasetState, dict]:
    """Rebuild a DatasetState from a snapshot plus the manifest's examples.

    ``human``/``unlabeled`` are the pools as materialized from the manifest;
    the snapshot says which unlabeled images have since been machine-labeled.
    """
    config = _field(doc, "config", dict, where, MalformedRecord)
    human_ids = _field(doc, "human_ids", list, where, MalformedRecord)
    unlabeled_ids = set(_field(doc, "unlabeled_ids", list, where, MalformedRecord))
    by_id = {u.image_id: u for u in unlabeled}
    if sorted(human_ids) != sorted(ex.image_id for ex in human):
        raise MalformedRecord(f"{where}.human_ids: do not match the manifest's labeled pool")
    machine = []
    for i, m in enumerate(_field(doc, "machine", list, where, MalformedRecord)):
        whe = f"{where}.machine[{i}]"
        image_id = _field(m, "image_id", str, whe, MalformedRecord)
        if image_id not in by_id:
            raise MalformedRecord(f"{whe}: image {image_id!r} is not in the manifest's unlabeled pool")
        ann, _ = annotation_from_doc(_field(m, "annotation", dict, whe, MalformedRecord), whe)
        src = by_id[image_id]
        machine.append(
            MachineExample(
                image_id=image_id,
                features=src.features,
                proposals=src.proposals,
                annotation=AnnotationMap(ann.class_maps, image_id=image_id),
                beta=_field(m, "beta", float, whe, MalformedRecord),
                round_added=_field(m, "round_added", int, whe, MalformedRecord),
            )
        )
    machine_ids = {m.image_id for m in machine}
    for uid in unlabeled_ids:
        if uid not in by_id:
            raise MalformedRecord(f"{where}.unlabeled_ids: unknown image {uid!r}")
        if uid in machine_ids:
            raise MalformedRecord(f"{where}: image {uid!r} is both unlabeled and machine-labeled")
    remaining = tuple(u for u in unlabeled if u.image_id in unlabeled_ids)
    if len(remaining) + len(machine) != len(unlabeled):
        raise MalformedRecord(f"{where}: pool sizes do not add up to the manifest's unlabeled pool")
    history = tuple(
        record_from_doc(r, f"{where}.history[{i}]")
        for i, r in enumerate(_field(doc, "history", list, where, MalformedRecord))
    )
    state = DatasetState(
        human=tuple(human), machine=tuple(machine), unlabeled=remaining, history=history
    )
    return state, config


def write_dataset(out_dir: str | Path, ds) -> tuple[Path, Path]:
    """Lay a synthetic dataset out on disk and return both manifest paths.

    Creates ``features/``, ``proposals/`` and ``gt/`` subdirectories plus
    ``manifest.json`` (labeled + unlabeled pools) and ``heldout-manifest.json``
    (fully annotated, for evaluation only).
    """
    out = Path(out_dir)
    for sub in ("features", "proposals", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    def emit(img, pool: str, with_gt: bool) -> ManifestEntry:
        features_rel = f"features/{img.image_id}.rast"
        proposals_rel = f"proposals/{img.image_id}.json"
        save_raster(out / features_rel, img.features)
        pset = proposals_from_masks(
            img.image_id,
            img.proposals,
            sources=[{"kind": o.kind, "class": o.class_index, "blob": o.blob} for o in img.provenance],
        )
        save_proposals(out / proposals_rel, pset)
        gt_rel = None
        if with_gt:
            gt_rel = f"gt/{img.image_id}.json"
            save_annotation(out / gt_rel, img.gt)
        return ManifestEntry(img.image_id, features_rel, proposals_rel, gt_rel, pool)

    entries = [emit(img, "labeled", True) for img in ds.human]
    entries += [emit(img, "unlabeled", False) for img in ds.unlabeled]
    manifest_path = out / "manifest.json"
    save_manifest(manifest_path, Manifest(tuple(entries)))

    held = [emit(img, "labeled", True) for img in ds.held_out]
    heldout_path = out / "heldout-manifest.json"
    save_manifest(heldout_path, Manifest(tuple(held)))
    return manifest_path, heldout_path


# --- run directories ----------------------------------------------------------


class RunDir:
    """A loop run's working directory: state snapshot, records, lock, and log.

    The lock file forbids two concurrent loops over the same directory; it is
    created exclusively and removed on clean exit.  The log is the only
    artifact carrying timestamps.
    """

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.rounds_dir = self.path / "rounds"
        self.state_path = self.path / "state.json"
        self.lock_path = self.path / ".lock"
        self.log_path = self.path / "log.txt"

    def ensure(self) -> "RunDir":
        self.path.mkdir(parents=True, exist_ok=True)
        self.rounds_dir.mkdir(exist_ok=True)
        return self

    def __enter__(self) -> "RunDir":
        self.ensure()
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLocked(
                f"{self.lock_path} exists: another loop may be running on this directory "
                "(remove the lock file if that run is dead)"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(f"pid {os.getpid()}\n")
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        try:
            os.unlink(self.lock_path)
        except FileNotFoundError:
            pass

    def log(self, message: str) -> None:
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
        with open(self.log_path, "a", encoding="utf-8") as fh:
            fh.write(f"{stamp} {message}\n")

    def save_state(self, state: DatasetState, config: dict) -> None:
        atomic_write_text(self.state_path, canonical_dumps(state_to_doc(state, config)))
        if state.history:
            record = state.history[-1]
            atomic_write_text(
                self.rounds_dir / f"round-{record.round_index:04d}.json",
                canonical_dumps(record_to_doc(record)),
            )

    def has_state(self) -> bool:
        return self.state_path.exists()

    def load_state(
        self, human: Sequence[LabeledExample], unlabeled: Sequence[UnlabeledExample]
    ) -> tuple[DatasetState, dict]:
        doc = _load_json(self.state_path, MalformedRecord)
        return state_from_doc(doc, human, unlabeled, str(self.state_path))
