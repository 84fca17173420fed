"""Patient-grouped embedding datasets and patient-level fold construction.

Records are immutable after construction, so datasets can be shared freely
across parallel workers.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable

import numpy as np


class FoldCountExceedsPatients(ValueError):
    """Requested more folds than there are patients."""


class UnknownPatient(ValueError):
    """A patient filter names a patient that is not in the dataset."""


@dataclass(frozen=True, eq=False)
class EmbeddingRecord:
    """One frame's feature vector plus patient/sequence/frame identity and label."""

    patient_id: str
    sequence_id: str
    frame_index: int
    label: int
    vector: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float32).reshape(-1)
        vec.setflags(write=False)
        object.__setattr__(self, "vector", vec)

    @property
    def identity(self) -> tuple[str, str, int]:
        return (self.patient_id, self.sequence_id, self.frame_index)

    def __eq__(self, other):
        if not isinstance(other, EmbeddingRecord):
            return NotImplemented
        return (
            self.identity == other.identity
            and self.label == other.label
            and np.array_equal(self.vector, other.vector)
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    """A named collection of embedding records with declared dim and class count."""

    records: tuple[EmbeddingRecord, ...]
    dim: int
    num_classes: int
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.num_classes == other.num_classes
            and self.name == other.name
            and self.records == other.records
        )

    @cached_property
    def patients(self) -> tuple[str, ...]:
        """Sorted unique patient ids."""
        return tuple(sorted({r.patient_id for r in self.records}))

    @cached_property
    def labels(self) -> np.ndarray:
        arr = np.array([r.label for r in self.records], dtype=np.int64)
        arr.setflags(write=False)
        return arr

    @cached_property
    def patient_ids(self) -> tuple[str, ...]:
        """Per-record patient id, aligned with `vectors` rows."""
        return tuple(r.patient_id for r in self.records)

    @cached_property
    def vectors(self) -> np.ndarray:
        """(N, dim) float32 matrix of all record vectors, row per record."""
        if not self.records:
            return np.zeros((0, self.dim), dtype=np.float32)
        mat = np.stack([r.vector for r in self.records])
        mat.setflags(write=False)
        return mat


@dataclass(frozen=True)
class Violation:
    rule: str
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __iter__(self):
        return iter(self.violations)

    def __len__(self):
        return len(self.violations)


def validate_dataset(dataset: Dataset) -> ValidationReport:
    """Check every dataset invariant; report violations instead of raising.

    The empty report means the dataset is consistent. Each violation names
    the offending record identity and the rule it breaks.
    """
    violations: list[Violation] = []
    if not dataset.records:
        violations.append(Violation("empty dataset", "dataset has no records"))
    seen: set[tuple[str, str, int]] = set()
    for rec in dataset.records:
        ident = f"({rec.patient_id}, {rec.sequence_id}, {rec.frame_index})"
        if rec.vector.shape != (dataset.dim,):
            violations.append(
                Violation(
                    "dimension mismatch",
                    f"{ident}: vector dim {rec.vector.shape[0]} != declared {dataset.dim}",
                )
            )
        if not (0 <= rec.label < dataset.num_classes):
            violations.append(
                Violation(
                    "bad label",
                    f"{ident}: label {rec.label} outside [0, {dataset.num_classes})",
                )
            )
        if rec.frame_index < 0:
            violations.append(
                Violation("negative frame index", f"{ident}: frame index < 0")
            )
        if not np.all(np.isfinite(rec.vector)):
            violations.append(
                Violation("non-finite vector", f"{ident}: vector has NaN or Inf")
            )
        if rec.identity in seen:
            violations.append(
                Violation("duplicate identity", f"{ident} appears more than once")
            )
        seen.add(rec.identity)
    return ValidationReport(tuple(violations))


@dataclass(frozen=True)
class FoldAssignment:
    """Partition of patients into k folds, balanced within one patient."""

    k: int
    mapping: dict[str, int]

    def fold(self, index: int) -> tuple[str, ...]:
        return tuple(sorted(p for p, f in self.mapping.items() if f == index))

    def sizes(self) -> list[int]:
        counts = [0] * self.k
        for f in self.mapping.values():
            counts[f] += 1
        return counts


def make_folds(
    patient_ids: Iterable[str],
    k: int,
    seed: int,
    stratify_labels: dict[str, int] | None = None,
) -> FoldAssignment:
    """Seeded balanced partition of patients into k folds.

    The shuffle runs over the lexicographically sorted patient list, so the
    assignment is independent of input order and bit-identical for a fixed
    (patient set, k, seed). With `stratify_labels` (patient -> group, e.g.
    malignancy status), each group is dealt round-robin so group counts stay
    balanced across folds; overall sizes still differ by at most one.
    """
    patients = sorted(set(patient_ids))
    if k < 2:
        raise ValueError(f"fold count must be >= 2, got {k}")
    if len(patients) < k:
        raise FoldCountExceedsPatients(
            f"cannot make {k} folds from {len(patients)} patients"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(patients))
    if stratify_labels is None:
        mapping = {patients[j]: i % k for i, j in enumerate(order)}
        return FoldAssignment(k=k, mapping=mapping)

    shuffled = [patients[j] for j in order]
    groups: dict[int, list[str]] = {}
    for p in shuffled:
        groups.setdefault(stratify_labels.get(p, 0), []).append(p)
    mapping = {}
    slot = 0  # deal groups consecutively so overall fold sizes stay balanced
    for label in sorted(groups):
        for p in groups[label]:
            mapping[p] = slot % k
            slot += 1
    return FoldAssignment(k=k, mapping=mapping)


def filter_by_patients(dataset: Dataset, patients: Iterable[str]) -> Dataset:
    """Restrict a dataset to the given patients, preserving dim and classes.

    An empty patient set yields an empty dataset; downstream consumers (the
    episode sampler) are the ones that reject unusable datasets.
    """
    wanted = set(patients)
    missing = wanted - set(dataset.patients)
    if missing:
        raise UnknownPatient(f"patients not in dataset: {sorted(missing)}")
    kept = tuple(r for r in dataset.records if r.patient_id in wanted)
    return Dataset(
        records=kept,
        dim=dataset.dim,
        num_classes=dataset.num_classes,
        name=dataset.name,
    )
