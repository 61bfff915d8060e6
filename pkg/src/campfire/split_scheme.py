"""Distribution-shift-isolating train/val/test assignment of wells.

Target plates: a few whole plates and a set of non-control compounds are held
out entirely (OOD); each remaining compound gets a fixed number of train /
val / test wells drawn from distinct in-distribution plates. Compound-kind
plates contribute training wells only, by independent coin flips.

Every test well then falls in exactly one of four shift categories, crossing
compound status (ID/OOD) with plate status (ID/OOD).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data_model import Manifest
from .errors import MalformedManifest, NoNonControlCompounds, NotEnoughPlates

SPLITS = ("train", "val", "test", "excluded")

SHIFT_CATEGORIES = (
    "ID_compound_ID_plate",
    "ID_compound_OOD_plate",
    "OOD_compound_ID_plate",
    "OOD_compound_OOD_plate",
)


@dataclass
class SplitConfig:
    n_heldout_compounds: int = 60
    n_ood_plates: int = 5
    plates_train: int = 14
    plates_val: int = 2
    plates_test: int = 4
    p_t: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_t <= 1.0:
            raise ValueError(f"p_t must be in [0,1], got {self.p_t}")
        for name in ("plates_train", "plates_val", "plates_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def plates_total(self) -> int:
        return self.plates_train + self.plates_val + self.plates_test


@dataclass
class SplitAssignment:
    well_split: dict[tuple[str, str], str]  # (plate, well) -> train|val|test|excluded
    compound_status: dict[str, str]  # compound -> ID|OOD
    plate_status: dict[str, str]  # plate -> ID|OOD

    def shift_category(self, plate_id: str, compound_id: str) -> str:
        c = self.compound_status.get(compound_id, "ID")
        p = self.plate_status.get(plate_id, "ID")
        return f"{c}_compound_{p}_plate"

    def wells_in(self, split: str) -> list[tuple[str, str]]:
        return sorted(k for k, v in self.well_split.items() if v == split)

    def merged_with(self, other: "SplitAssignment") -> "SplitAssignment":
        """Union of two assignments over disjoint wells (target + compound plates)."""
        overlap = set(self.well_split) & set(other.well_split)
        if overlap:
            raise ValueError(f"assignments overlap on {len(overlap)} wells")
        return SplitAssignment(
            well_split={**self.well_split, **other.well_split},
            compound_status={**other.compound_status, **self.compound_status},
            plate_status={**other.plate_status, **self.plate_status},
        )


def _sorted_wells(manifest: Manifest):
    return sorted(manifest.wells, key=lambda w: (w.plate_id, w.well_id, w.compound_id))


def assign_target2(manifest: Manifest, cfg: SplitConfig) -> SplitAssignment:
    """Assign every target-plate well to train/val/test/excluded.

    Deterministic in (manifest contents, cfg.seed); invariant to manifest row
    order because all sampling happens over lexicographically sorted keys.
    """
    wells = _sorted_wells(manifest)
    if any(manifest.plate_kind[w.plate_id] != "target2" for w in wells):
        raise MalformedManifest("assign_target2 expects a target2-only manifest")
    rng = np.random.default_rng(cfg.seed)
    plates = sorted({w.plate_id for w in wells})

    ood_plates: set[str] = set()
    if cfg.n_ood_plates > 0:
        ood_plates = set(rng.choice(plates, size=cfg.n_ood_plates, replace=False))

    controls = {w.compound_id for w in wells if w.role != "standard"}
    all_compounds = sorted({w.compound_id for w in wells})
    candidates = sorted(set(all_compounds) - controls)
    ood_compounds: set[str] = set()
    if cfg.n_heldout_compounds > 0:
        if not candidates:
            raise NoNonControlCompounds("no non-control compounds to hold out")
        if len(candidates) < cfg.n_heldout_compounds:
            raise NoNonControlCompounds(
                f"asked for {cfg.n_heldout_compounds} held-out compounds, "
                f"only {len(candidates)} non-control compounds exist"
            )
        ood_compounds = set(rng.choice(candidates, size=cfg.n_heldout_compounds, replace=False))

    well_split: dict[tuple[str, str], str] = {}
    for w in wells:
        if w.plate_id in ood_plates or w.compound_id in ood_compounds:
            well_split[w.key] = "test"
        else:
            well_split[w.key] = "excluded"

    # Per remaining compound: partition its ID plates into train/val/test and
    # take one well per selected plate. If a compound has replicate wells on a
    # plate, one is sampled; the rest stay excluded.
    by_compound_plate: dict[str, dict[str, list[tuple[str, str]]]] = {}
    for w in wells:
        if w.plate_id in ood_plates or w.compound_id in ood_compounds:
            continue
        by_compound_plate.setdefault(w.compound_id, {}).setdefault(w.plate_id, []).append(w.key)

    for compound in sorted(by_compound_plate):
        plate_map = by_compound_plate[compound]
        id_plates = sorted(plate_map)
        n_avail = len(id_plates)
        if n_avail < 3:
            raise NotEnoughPlates(
                f"compound {compound!r} appears on only {n_avail} ID plates (need >= 3)"
            )
        total = cfg.plates_total
        if n_avail >= total:
            n_train, n_val, n_test = cfg.plates_train, cfg.plates_val, cfg.plates_test
            chosen = list(rng.choice(id_plates, size=total, replace=False))
        else:
            # Fewer plates than configured: scale proportionally, but keep at
            # least one test and one val plate so the compound stays evaluable.
            n_test = max(1, int(np.floor(cfg.plates_test * n_avail / total)))
            n_val = max(1, int(np.floor(cfg.plates_val * n_avail / total)))
            n_train = n_avail - n_test - n_val
            chosen = list(rng.permutation(id_plates))
        for i, plate in enumerate(chosen):
            split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
            keys = sorted(plate_map[plate])
            pick = keys[int(rng.integers(0, len(keys)))] if len(keys) > 1 else keys[0]
            well_split[pick] = split

    compound_status = {c: ("OOD" if c in ood_compounds else "ID") for c in all_compounds}
    plate_status = {p: ("OOD" if p in ood_plates else "ID") for p in plates}
    return SplitAssignment(well_split, compound_status, plate_status)


def assign_compound_plates(manifest: Manifest, cfg: SplitConfig) -> SplitAssignment:
    """Independent p_t coin flip per well: train or excluded, never val/test."""
    wells = _sorted_wells(manifest)
    if any(manifest.plate_kind[w.plate_id] != "compound" for w in wells):
        raise MalformedManifest("assign_compound_plates expects a compound-only manifest")
    rng = np.random.default_rng(cfg.seed)
    well_split = {}
    for w in wells:
        well_split[w.key] = "train" if rng.random() < cfg.p_t else "excluded"
    plate_status = {p: "ID" for p in {w.plate_id for w in wells}}
    compound_status = {c: "ID" for c in {w.compound_id for w in wells}}
    return SplitAssignment(well_split, compound_status, plate_status)


@dataclass
class AuditReport:
    violations: list[str]
    split_counts: dict[str, int]
    per_compound_counts: dict[str, dict[str, int]]
    test_categories: dict[tuple[str, str], str]
    category_counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.category_counts:
            counts = {c: 0 for c in SHIFT_CATEGORIES}
            for cat in self.test_categories.values():
                counts[cat] += 1
            self.category_counts = counts

    @property
    def clean(self) -> bool:
        return not self.violations


def audit(assignment: SplitAssignment, manifest: Manifest) -> AuditReport:
    """Check the leakage guarantees and tabulate the assignment."""
    violations: list[str] = []
    wells = {w.key: w for w in manifest.wells}

    missing = set(wells) - set(assignment.well_split)
    for key in sorted(missing):
        violations.append(f"well {key} not covered by assignment")

    split_counts = {s: 0 for s in SPLITS}
    per_compound: dict[str, dict[str, int]] = {}
    test_categories: dict[tuple[str, str], str] = {}

    for key, split in sorted(assignment.well_split.items()):
        w = wells.get(key)
        if w is None:
            violations.append(f"assigned well {key} absent from manifest")
            continue
        split_counts[split] += 1
        per_compound.setdefault(w.compound_id, {s: 0 for s in SPLITS})[split] += 1
        plate_ood = assignment.plate_status.get(w.plate_id) == "OOD"
        compound_ood = assignment.compound_status.get(w.compound_id) == "OOD"
        if split in ("train", "val"):
            if plate_ood:
                violations.append(f"OOD plate {w.plate_id} has {split} well {key}")
            if compound_ood:
                violations.append(f"OOD compound {w.compound_id} has {split} well {key}")
        if split == "test":
            test_categories[key] = assignment.shift_category(w.plate_id, w.compound_id)
        if compound_ood and w.role != "standard":
            violations.append(f"control compound {w.compound_id} marked OOD (well {key})")

    return AuditReport(violations, split_counts, per_compound, test_categories)


# ---------------------------------------------------------------------------
# Serialization: plate_id, well_id, split, compound_status, plate_status,
# shift_category (NA outside the test split).
# ---------------------------------------------------------------------------

ASSIGNMENT_COLUMNS = ("plate_id", "well_id", "split", "compound_status", "plate_status", "shift_category")


def write_assignment(assignment: SplitAssignment, manifest: Manifest, path: str | Path) -> None:
    wells = {w.key: w for w in manifest.wells}
    rows = ["\t".join(ASSIGNMENT_COLUMNS)]
    for key in sorted(assignment.well_split):
        plate_id, well_id = key
        split = assignment.well_split[key]
        w = wells[key]
        cat = assignment.shift_category(plate_id, w.compound_id) if split == "test" else "NA"
        rows.append(
            "\t".join(
                (
                    plate_id,
                    well_id,
                    split,
                    assignment.compound_status.get(w.compound_id, "ID"),
                    assignment.plate_status.get(plate_id, "ID"),
                    cat,
                )
            )
        )
    Path(path).write_text("\n".join(rows) + "\n")


def read_assignment(path: str | Path, manifest: Manifest) -> SplitAssignment:
    lines = Path(path).read_text().splitlines()
    if not lines or tuple(lines[0].split("\t")) != ASSIGNMENT_COLUMNS:
        raise MalformedManifest(f"bad assignment header in {path}")
    wells = {w.key: w for w in manifest.wells}
    well_split: dict[tuple[str, str], str] = {}
    compound_status: dict[str, str] = {}
    plate_status: dict[str, str] = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        plate_id, well_id, split, c_status, p_status, _cat = line.split("\t")
        key = (plate_id, well_id)
        well_split[key] = split
        plate_status[plate_id] = p_status
        if key in wells:
            compound_status[wells[key].compound_id] = c_status
    return SplitAssignment(well_split, compound_status, plate_status)
