"""Bit-exact embedding file formats and the synthetic clustered-data generator.

Binary layout (all integers little-endian):

    magic "FSLE" | u32 version=1 | u32 num_records | u32 dim | u32 num_classes
    | u32 string-table length | that many bytes of UTF-8 newline-separated names
    per record: u32 patient idx | u32 sequence idx | u32 frame_index | u8 label
                | dim float32 values

Patient and sequence indices point into the shared name table. Extra table
entries that no record references are legal (writers may append provenance).
"""
from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass

import numpy as np

from .datamodel import Dataset, EmbeddingRecord, validate_dataset

MAGIC = b"FSLE"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


class EmbedIOError(Exception):
    """Base class for embedding I/O failures."""


class BadMagic(EmbedIOError):
    pass


class UnsupportedVersion(EmbedIOError):
    pass


class TruncatedFile(EmbedIOError):
    pass


class DimensionMismatch(EmbedIOError):
    pass


class DatasetEmpty(EmbedIOError):
    pass


class SinkFailure(EmbedIOError):
    pass


class MalformedRow(EmbedIOError):
    def __init__(self, row: int, reason: str):
        super().__init__(f"row {row}: {reason}")
        self.row = row


class ValidationFailed(EmbedIOError):
    """Loaded data violates dataset invariants."""

    def __init__(self, report):
        super().__init__("; ".join(v.detail for v in report))
        self.report = report


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype(
        [
            ("patient", "<u4"),
            ("sequence", "<u4"),
            ("frame", "<u4"),
            ("label", "u1"),
            ("vector", "<f4", (dim,)),
        ]
    )


def _check_valid(dataset: Dataset) -> None:
    if not dataset.records:
        raise DatasetEmpty("refusing to serialize an empty dataset")
    report = validate_dataset(dataset)
    if not report.ok:
        raise ValidationFailed(report)


def write_embeddings(dataset: Dataset, sink, extra_names: tuple[str, ...] = ()) -> int:
    """Serialize a valid dataset to a binary sink; returns bytes written.

    `extra_names` lets callers append provenance entries to the string table
    (they are ignored by the reader).
    """
    _check_valid(dataset)
    patients = sorted({r.patient_id for r in dataset.records})
    sequences = sorted({r.sequence_id for r in dataset.records})
    table = patients + sequences + list(extra_names)
    for name in table:
        if "\n" in name:
            raise EmbedIOError(f"name contains newline: {name!r}")
    p_index = {p: i for i, p in enumerate(patients)}
    s_index = {s: len(patients) + i for i, s in enumerate(sequences)}

    strtab = "\n".join(table).encode("utf-8")
    header = _HEADER.pack(
        MAGIC, VERSION, len(dataset.records), dataset.dim, dataset.num_classes,
        len(strtab),
    )
    payload = np.empty(len(dataset.records), dtype=_record_dtype(dataset.dim))
    for i, rec in enumerate(dataset.records):
        payload[i] = (
            p_index[rec.patient_id],
            s_index[rec.sequence_id],
            rec.frame_index,
            rec.label,
            rec.vector,
        )
    blob = header + strtab + payload.tobytes()
    try:
        sink.write(blob)
    except OSError as exc:
        raise SinkFailure(str(exc)) from exc
    return len(blob)


def _read_exact(source, n: int) -> bytes:
    data = source.read(n)
    if len(data) != n:
        raise TruncatedFile(f"wanted {n} bytes, got {len(data)}")
    return data


def read_header(source) -> dict:
    """Parse and validate the header; returns fields plus the name table."""
    raw = source.read(_HEADER.size)
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagic("not an FSLE embedding file")
    if len(raw) != _HEADER.size:
        raise TruncatedFile("header cut short")
    _, version, num_records, dim, num_classes, strtab_len = _HEADER.unpack(raw)
    if version != VERSION:
        raise UnsupportedVersion(f"version {version}, reader supports {VERSION}")
    if num_records < 1:
        raise TruncatedFile("header declares zero records")
    if dim < 1:
        raise DimensionMismatch(f"header declares dim {dim}")
    names = _read_exact(source, strtab_len).decode("utf-8").split("\n")
    return {
        "num_records": num_records,
        "dim": dim,
        "num_classes": num_classes,
        "names": names,
    }


def read_embeddings(source, name: str = "") -> Dataset:
    """Read a binary embedding file into a validated Dataset."""
    header = read_header(source)
    dim = header["dim"]
    names = header["names"]
    dtype = _record_dtype(dim)
    blob = source.read()
    if len(blob) < header["num_records"] * dtype.itemsize:
        raise TruncatedFile(
            f"payload holds {len(blob) // dtype.itemsize} of "
            f"{header['num_records']} declared records"
        )
    if len(blob) > header["num_records"] * dtype.itemsize:
        raise EmbedIOError("trailing bytes after last record")
    payload = np.frombuffer(blob, dtype=dtype)
    records = []
    for row in payload:
        p_idx, s_idx = int(row["patient"]), int(row["sequence"])
        if p_idx >= len(names) or s_idx >= len(names):
            raise EmbedIOError(f"name index out of range: {p_idx}, {s_idx}")
        records.append(
            EmbeddingRecord(
                patient_id=names[p_idx],
                sequence_id=names[s_idx],
                frame_index=int(row["frame"]),
                label=int(row["label"]),
                vector=np.array(row["vector"], dtype=np.float32),
            )
        )
    dataset = Dataset(
        records=tuple(records), dim=dim, num_classes=header["num_classes"], name=name
    )
    report = validate_dataset(dataset)
    if not report.ok:
        raise ValidationFailed(report)
    return dataset


def write_embeddings_file(dataset: Dataset, path, extra_names: tuple[str, ...] = ()) -> int:
    try:
        with open(path, "wb") as fh:
            return write_embeddings(dataset, fh, extra_names)
    except OSError as exc:
        raise SinkFailure(str(exc)) from exc


def read_embeddings_file(path, name: str | None = None) -> Dataset:
    import os

    if name is None:
        name = os.path.splitext(os.path.basename(str(path)))[0]
    with open(path, "rb") as fh:
        return read_embeddings(fh, name=name)


# ---------------------------------------------------------------------------
# CSV interchange


def write_csv(dataset: Dataset, sink) -> None:
    """CSV with columns patient_id,sequence_id,frame_index,label,e0..e{D-1}.

    Values carry 9 significant digits, enough to round-trip float32 exactly.
    """
    _check_valid(dataset)
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(
        ["patient_id", "sequence_id", "frame_index", "label"]
        + [f"e{i}" for i in range(dataset.dim)]
    )
    for rec in dataset.records:
        writer.writerow(
            [rec.patient_id, rec.sequence_id, rec.frame_index, rec.label]
            + [f"{v:.9g}" for v in rec.vector]
        )


def read_csv(source, name: str = "") -> Dataset:
    """Parse the CSV interchange format back into a validated Dataset."""
    reader = csv.reader(source)
    try:
        header = next(reader)
    except StopIteration:
        raise MalformedRow(1, "missing header row") from None
    fixed = ["patient_id", "sequence_id", "frame_index", "label"]
    if header[: len(fixed)] != fixed:
        raise MalformedRow(1, f"bad header columns {header[:4]}")
    dim = len(header) - len(fixed)
    if dim < 1 or header[len(fixed):] != [f"e{i}" for i in range(dim)]:
        raise MalformedRow(1, "feature columns must be e0..e{D-1}")
    records = []
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise MalformedRow(lineno, f"{len(row)} columns, expected {len(header)}")
        try:
            frame = int(row[2])
            label = int(row[3])
            vec = np.array([float(v) for v in row[4:]], dtype=np.float32)
        except ValueError as exc:
            raise MalformedRow(lineno, str(exc)) from None
        records.append(EmbeddingRecord(row[0], row[1], frame, label, vec))
    if not records:
        raise MalformedRow(2, "no data rows")
    num_classes = max(r.label for r in records) + 1
    dataset = Dataset(tuple(records), dim=dim, num_classes=num_classes, name=name)
    report = validate_dataset(dataset)
    if not report.ok:
        raise ValidationFailed(report)
    return dataset


def write_csv_file(dataset: Dataset, path) -> None:
    try:
        with open(path, "w", newline="") as fh:
            write_csv(dataset, fh)
    except OSError as exc:
        raise SinkFailure(str(exc)) from exc


def read_csv_file(path, name: str | None = None) -> Dataset:
    import os

    if name is None:
        name = os.path.splitext(os.path.basename(str(path)))[0]
    with open(path, "r", newline="") as fh:
        return read_csv(fh, name=name)


# ---------------------------------------------------------------------------
# synthetic generator


class InvalidSynthSpec(ValueError):
    def __init__(self, field_name: str, reason: str):
        super().__init__(f"{field_name}: {reason}")
        self.field_name = field_name


@dataclass(frozen=True)
class SynthSpec:
    """Knobs for the patient-clustered Gaussian generator.

    Each frame vector is mu_class + delta_patient + noise: the benign mean
    sits at the origin, the malignant mean at class_separation along the
    first axis, delta_patient is drawn once per patient with std patient_sigma,
    and per-frame noise has std noise_sigma. patient_sigma is the diversity
    knob: pushing it past class_separation makes patient clusters dominate
    class structure.
    """

    num_patients: int
    frames_per_patient_per_class: int
    dim: int
    class_separation: float
    patient_sigma: float
    noise_sigma: float
    malignant_patient_fraction: float = 1.0

    def validate(self) -> None:
        if self.num_patients < 1:
            raise InvalidSynthSpec("num_patients", "must be >= 1")
        if self.frames_per_patient_per_class < 1:
            raise InvalidSynthSpec("frames_per_patient_per_class", "must be >= 1")
        if self.dim < 1:
            raise InvalidSynthSpec("dim", "must be >= 1")
        if not (math.isfinite(self.class_separation) and self.class_separation >= 0):
            raise InvalidSynthSpec("class_separation", "must be finite and >= 0")
        if not (math.isfinite(self.patient_sigma) and self.patient_sigma >= 0):
            raise InvalidSynthSpec("patient_sigma", "must be finite and >= 0")
        if not (math.isfinite(self.noise_sigma) and self.noise_sigma > 0):
            raise InvalidSynthSpec("noise_sigma", "must be finite and > 0")
        if not 0.0 <= self.malignant_patient_fraction <= 1.0:
            raise InvalidSynthSpec("malignant_patient_fraction", "must be in [0, 1]")


def synth_dataset(spec: SynthSpec, seed: int, name: str = "synth") -> Dataset:
    """Deterministic patient-clustered two-class dataset.

    The first ceil(fraction * num_patients) patients carry both classes
    (tumor plus contralateral healthy tissue); the rest carry only class 0.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    n_malignant = math.ceil(spec.malignant_patient_fraction * spec.num_patients)
    width = max(3, len(str(spec.num_patients - 1)))
    patient_ids = [f"p{i:0{width}d}" for i in range(spec.num_patients)]

    mu = np.zeros((2, spec.dim))
    mu[1, 0] = spec.class_separation  # fixed unit direction: first axis
    offsets = rng.normal(0.0, spec.patient_sigma, (spec.num_patients, spec.dim))

    records = []
    for i, pid in enumerate(patient_ids):
        classes = (0, 1) if i < n_malignant else (0,)
        for label in classes:
            seq = f"{pid}_c{label}"
            noise = rng.normal(
                0.0, spec.noise_sigma, (spec.frames_per_patient_per_class, spec.dim)
            )
            frames = mu[label] + offsets[i] + noise
            for j in range(spec.frames_per_patient_per_class):
                records.append(
                    EmbeddingRecord(pid, seq, j, label, frames[j].astype(np.float32))
                )
    return Dataset(tuple(records), dim=spec.dim, num_classes=2, name=name)


def dataset_to_bytes(dataset: Dataset) -> bytes:
    buf = io.BytesIO()
    write_embeddings(dataset, buf)
    return buf.getvalue()
