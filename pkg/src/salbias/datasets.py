"""Fixation datasets: types, manifest ingestion, filters, and crossval splits.

A dataset is a set of stimuli plus per-fixation records (stimulus, subject,
position, scanpath ordinal).  Datasets are immutable after construction;
filters return new datasets and record what they did in the provenance list.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import make_rng


@dataclass(frozen=True)
class StimulusMeta:
    stimulus_id: str
    width_px: int
    height_px: int
    px_per_dva: float
    image_path: str | None = None
    attributes: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.width_px < 8 or self.height_px < 8:
            raise ValueError(f"stimulus {self.stimulus_id}: dimensions must be >= 8px")
        if self.px_per_dva <= 0:
            raise ValueError(f"stimulus {self.stimulus_id}: px_per_dva must be positive")


@dataclass(frozen=True)
class Fixation:
    stimulus_id: str
    subject_id: str
    x: float
    y: float
    ordinal: int

    def __post_init__(self) -> None:
        if self.ordinal < 0:
            raise ValueError("fixation ordinal must be non-negative")


@dataclass(frozen=True)
class FixationDataset:
    name: str
    stimuli: tuple[StimulusMeta, ...]
    fixations: tuple[Fixation, ...]
    provenance: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        ids = [s.stimulus_id for s in self.stimuli]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{self.name}: duplicate stimulus ids")
        by_id = {s.stimulus_id: s for s in self.stimuli}
        for fx in self.fixations:
            meta = by_id.get(fx.stimulus_id)
            if meta is None:
                raise ValueError(f"{self.name}: fixation references unknown stimulus {fx.stimulus_id!r}")
            if not (0 <= fx.x < meta.width_px and 0 <= fx.y < meta.height_px):
                raise ValueError(
                    f"{self.name}: fixation at ({fx.x}, {fx.y}) outside stimulus "
                    f"{fx.stimulus_id} ({meta.width_px}x{meta.height_px})"
                )

    @property
    def n_fixations(self) -> int:
        return len(self.fixations)

    def stimulus(self, stimulus_id: str) -> StimulusMeta:
        for s in self.stimuli:
            if s.stimulus_id == stimulus_id:
                return s
        raise KeyError(stimulus_id)

    def stimuli_by_id(self) -> dict[str, StimulusMeta]:
        return {s.stimulus_id: s for s in self.stimuli}

    def fixations_for(self, stimulus_id: str) -> list[Fixation]:
        return [f for f in self.fixations if f.stimulus_id == stimulus_id]

    def scanpaths(self) -> dict[tuple[str, str], list[Fixation]]:
        """Fixations grouped by (stimulus, subject), sorted by ordinal."""
        groups: dict[tuple[str, str], list[Fixation]] = {}
        for fx in self.fixations:
            groups.setdefault((fx.stimulus_id, fx.subject_id), []).append(fx)
        for path in groups.values():
            path.sort(key=lambda f: f.ordinal)
        return groups

    def with_provenance(self, note: str) -> "FixationDataset":
        return replace(self, provenance=self.provenance + (note,))


class DataError(Exception):
    """Raised for malformed manifests, missing files, or invalid records."""


# ---------------------------------------------------------------------------
# Manifest ingestion
# ---------------------------------------------------------------------------

FIXATION_CSV_HEADER = ["stimulus_id", "subject_id", "ordinal", "x", "y"]


def load_dataset(manifest_path, on_oob: str = "drop") -> FixationDataset:
    """Load a dataset from a JSON manifest.

    Out-of-bounds fixations are dropped (with a provenance count) or rejected,
    depending on ``on_oob`` ("drop" or "error").
    """
    if on_oob not in ("drop", "error"):
        raise ValueError("on_oob must be 'drop' or 'error'")
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text("utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {manifest_path}: {exc}") from exc

    for key in ("name", "stimuli", "fixations_file"):
        if key not in manifest:
            raise DataError(f"manifest missing key {key!r}")

    stimuli = []
    for entry in manifest["stimuli"]:
        try:
            stimuli.append(
                StimulusMeta(
                    stimulus_id=str(entry["id"]),
                    width_px=int(entry["width"]),
                    height_px=int(entry["height"]),
                    px_per_dva=float(entry["px_per_dva"]),
                    image_path=entry.get("image"),
                    attributes={str(k): str(v) for k, v in entry.get("attributes", {}).items()},
                )
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad stimulus entry {entry!r}: {exc}") from exc
    by_id = {s.stimulus_id: s for s in stimuli}
    if len(by_id) != len(stimuli):
        raise DataError("duplicate stimulus ids in manifest")

    fixations_file = manifest_path.parent / manifest["fixations_file"]
    if not fixations_file.exists():
        raise DataError(f"fixations file not found: {fixations_file}")
    fixations, dropped = _read_fixation_csv(fixations_file.read_text("utf-8"), by_id, on_oob)

    ds = FixationDataset(
        name=str(manifest["name"]),
        stimuli=tuple(stimuli),
        fixations=tuple(fixations),
        provenance=(f"loaded from {manifest_path.name}; {dropped} dropped (out of bounds)",),
    )
    for filter_spec in manifest.get("filters", []):
        ds = apply_named_filter(ds, filter_spec["name"], filter_spec.get("args", {}))
    return ds


def _read_fixation_csv(text: str, by_id: dict[str, StimulusMeta], on_oob: str):
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != FIXATION_CSV_HEADER:
        raise DataError(f"fixation CSV header must be {FIXATION_CSV_HEADER}, got {header}")
    fixations: list[Fixation] = []
    dropped = 0
    for row in reader:
        if not row:
            continue
        stim_id, subject_id, ordinal, x, y = row
        meta = by_id.get(stim_id)
        if meta is None:
            raise DataError(f"fixation references undeclared stimulus {stim_id!r}")
        x, y = float(x), float(y)
        if not (0 <= x < meta.width_px and 0 <= y < meta.height_px):
            if on_oob == "error":
                raise DataError(f"fixation ({x}, {y}) outside stimulus {stim_id}")
            dropped += 1
            continue
        fixations.append(Fixation(stim_id, subject_id, x, y, int(ordinal)))
    return fixations, dropped


def save_dataset(ds: FixationDataset, out_dir, manifest_name: str = "manifest.json") -> Path:
    """Write a dataset as a manifest + fixation CSV; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fixations_name = "fixations.csv"
    rows = [",".join(FIXATION_CSV_HEADER)]
    for fx in ds.fixations:
        rows.append(f"{fx.stimulus_id},{fx.subject_id},{fx.ordinal},{fx.x!r},{fx.y!r}")
    (out_dir / fixations_name).write_text("\n".join(rows) + "\n", "utf-8")
    manifest = {
        "name": ds.name,
        "stimuli": [
            {
                "id": s.stimulus_id,
                "width": s.width_px,
                "height": s.height_px,
                "px_per_dva": s.px_per_dva,
                **({"image": s.image_path} if s.image_path else {}),
                **({"attributes": s.attributes} if s.attributes else {}),
            }
            for s in ds.stimuli
        ],
        "fixations_file": fixations_name,
        "filters": [],
    }
    manifest_path = out_dir / manifest_name
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", "utf-8")
    return manifest_path


# ---------------------------------------------------------------------------
# Filters (provenance-guarded idempotence)
# ---------------------------------------------------------------------------

def _already_applied(ds: FixationDataset, tag: str) -> bool:
    return any(note.startswith(tag) for note in ds.provenance)


def drop_initial_fixations(ds: FixationDataset) -> FixationDataset:
    """Remove the ordinal-0 fixation of every scanpath, re-indexing the rest.

    Datasets without scanpath structure (all ordinals zero with multi-fixation
    scanpaths) are exempt.  Re-applying is a no-op (provenance-guarded).
    """
    tag = "drop_initial_fixations"
    if _already_applied(ds, tag):
        return ds
    paths = ds.scanpaths()
    # All-zero ordinals on multi-fixation scanpaths mean the dataset carries
    # no scanpath structure and is exempt.
    all_zero = all(fx.ordinal == 0 for fx in ds.fixations)
    if all_zero and any(len(path) > 1 for path in paths.values()):
        return ds.with_provenance(f"{tag}: skipped (no scanpath structure)")
    kept: list[Fixation] = []
    for path in paths.values():
        for new_ordinal, fx in enumerate(path[1:]):
            kept.append(replace(fx, ordinal=new_ordinal))
    kept.sort(key=lambda f: (f.stimulus_id, f.subject_id, f.ordinal))
    removed = len(ds.fixations) - len(kept)
    return replace(
        ds,
        fixations=tuple(kept),
        provenance=ds.provenance + (f"{tag}: removed {removed} fixations",),
    )


def filter_cat2000_artifacts(
    ds: FixationDataset, subject: str = "20", y_threshold: float = 950.0
) -> FixationDataset:
    """Drop scanpaths of ``subject`` whose mean y position exceeds the threshold."""
    kept: list[Fixation] = []
    removed_paths = 0
    for (stim_id, subj), path in ds.scanpaths().items():
        if subj == subject and np.mean([fx.y for fx in path]) > y_threshold:
            removed_paths += 1
            continue
        kept.extend(path)
    kept.sort(key=lambda f: (f.stimulus_id, f.subject_id, f.ordinal))
    return replace(
        ds,
        fixations=tuple(kept),
        provenance=ds.provenance
        + (f"cat2000_artifacts(subject={subject}, y>{y_threshold}): removed {removed_paths} scanpaths",),
    )


FILTERS = {
    "drop_initial_fixations": drop_initial_fixations,
    "cat2000_artifacts": filter_cat2000_artifacts,
}


def apply_named_filter(ds: FixationDataset, name: str, args: dict) -> FixationDataset:
    if name not in FILTERS:
        raise DataError(f"unknown filter {name!r}; known: {sorted(FILTERS)}")
    return FILTERS[name](ds, **args)


def select_stimuli(ds: FixationDataset, stimulus_ids, note: str = "subset") -> FixationDataset:
    """Dataset restricted to the given stimuli (order follows the original)."""
    wanted = set(stimulus_ids)
    stimuli = tuple(s for s in ds.stimuli if s.stimulus_id in wanted)
    fixations = tuple(f for f in ds.fixations if f.stimulus_id in wanted)
    return replace(
        ds,
        stimuli=stimuli,
        fixations=fixations,
        provenance=ds.provenance + (f"{note}: kept {len(stimuli)} stimuli",),
    )


# ---------------------------------------------------------------------------
# Crossvalidation splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitAssignment:
    fold_count: int
    val_folds: int
    fold_of: dict[str, int]  # stimulus_id -> fold index

    def is_validation_fold(self, fold: int) -> bool:
        return fold < self.val_folds

    def train_ids(self) -> list[str]:
        return [sid for sid, fold in self.fold_of.items() if not self.is_validation_fold(fold)]

    def validation_ids(self) -> list[str]:
        return [sid for sid, fold in self.fold_of.items() if self.is_validation_fold(fold)]


def make_crossval_split(
    ds: FixationDataset,
    folds: int,
    val_folds: int = 1,
    stratify_attribute: str | None = None,
    seed: int = 0,
) -> SplitAssignment:
    """Deterministic stratified assignment of stimuli to folds.

    Within each stratum, stimuli are seeded-shuffled and dealt round-robin, so
    per-category fold counts differ by at most one.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if not (1 <= val_folds < folds):
        raise ValueError("val_folds must satisfy 1 <= val_folds < folds")
    groups: dict[str, list[str]] = {}
    for s in ds.stimuli:
        if stratify_attribute is None:
            key = ""
        else:
            if stratify_attribute not in s.attributes:
                raise DataError(
                    f"stimulus {s.stimulus_id} lacks stratify attribute {stratify_attribute!r}"
                )
            key = s.attributes[stratify_attribute]
        groups.setdefault(key, []).append(s.stimulus_id)

    rng = make_rng(seed, "crossval", ds.name, folds, val_folds, stratify_attribute)
    fold_of: dict[str, int] = {}
    offset = 0
    for key in sorted(groups):
        ids = sorted(groups[key])
        rng.shuffle(ids)
        for i, sid in enumerate(ids):
            fold_of[sid] = (offset + i) % folds
        offset += len(ids)
    return SplitAssignment(fold_count=folds, val_folds=val_folds, fold_of=fold_of)


def split_dataset(ds: FixationDataset, split: SplitAssignment) -> tuple[FixationDataset, FixationDataset]:
    """(train, validation) datasets induced by a split assignment."""
    train = select_stimuli(ds, split.train_ids(), note="train split")
    val = select_stimuli(ds, split.validation_ids(), note="validation split")
    return train, val
