"""FSLE binary and CSV writers (the file-format contract with the pipeline).

Layout, little-endian throughout:

    "FSLE" | u32 version=1 | u32 num_records | u32 dim | u32 num_classes
    | u32 string-table length | UTF-8 newline-separated names
    per record: u32 patient idx | u32 sequence idx | u32 frame | u8 label
                | dim float32

Provenance strings ride as extra name-table entries past the referenced ones;
readers resolve only the indices records use.
"""
from __future__ import annotations

import csv
import os
import struct
import tempfile

import numpy as np

MAGIC = b"FSLE"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


def fsle_bytes(rows, dim: int, num_classes: int, provenance: tuple[str, ...] = ()) -> bytes:
    """Serialize (patient_id, sequence_id, frame_index, label, vector) rows."""
    patients = sorted({r[0] for r in rows})
    sequences = sorted({r[1] for r in rows})
    table = patients + sequences + list(provenance)
    for name in table:
        if "\n" in name:
            raise ValueError(f"name contains newline: {name!r}")
    p_index = {p: i for i, p in enumerate(patients)}
    s_index = {s: len(patients) + i for i, s in enumerate(sequences)}
    strtab = "\n".join(table).encode("utf-8")

    out = bytearray()
    out += _HEADER.pack(MAGIC, VERSION, len(rows), dim, num_classes, len(strtab))
    out += strtab
    rec = struct.Struct("<IIIB")
    for patient, sequence, frame, label, vector in rows:
        vector = np.asarray(vector, dtype="<f4")
        if vector.shape != (dim,):
            raise ValueError(f"vector shape {vector.shape} != ({dim},)")
        out += rec.pack(p_index[patient], s_index[sequence], frame, label)
        out += vector.tobytes()
    return bytes(out)


def write_atomic(path: str, blob: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path: str, rows, dim: int) -> None:
    """CSV twin: patient_id,sequence_id,frame_index,label,e0..e{D-1} at 9
    significant digits (lossless for float32)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["patient_id", "sequence_id", "frame_index", "label"]
            + [f"e{i}" for i in range(dim)]
        )
        for patient, sequence, frame, label, vector in rows:
            writer.writerow(
                [patient, sequence, frame, label] + [f"{v:.9g}" for v in vector]
            )
