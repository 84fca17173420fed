"""The export run: manifest -> preprocessed batches -> backbone -> FSLE file."""
from __future__ import annotations

import torch

from . import backbone as bb
from .manifest import ExportManifest
from .writer import fsle_bytes, write_atomic, write_csv

BATCH_SIZE = 16


class ExportError(RuntimeError):
    pass


def compute_vectors(manifest: ExportManifest):
    """Run deterministic batch inference; returns (rows, feature dim)."""
    stem, width = bb.load_backbone(manifest.backbone)
    rows = []
    pending: list[torch.Tensor] = []

    def flush():
        if not pending:
            return
        feats = bb.pooled_features(stem, torch.cat(pending, dim=0))
        for vec in feats:
            rows.append(vec)
        pending.clear()

    for entry in manifest.entries:
        try:
            arr = bb.load_gray(manifest.image_path(entry))
            arr = bb.crop_inscribed_square(arr, manifest.circle_for(entry.sequence_id))
        except (OSError, ValueError) as exc:
            raise ExportError(f"{entry.filename}: {exc}") from exc
        pending.append(bb.to_model_input(arr))
        if len(pending) >= BATCH_SIZE:
            flush()
    flush()
    full = [
        (e.patient_id, e.sequence_id, e.frame_index, e.label, vec)
        for e, vec in zip(manifest.entries, rows)
    ]
    return full, width


def export_embeddings(
    manifest: ExportManifest,
    out_path: str | None = None,
    csv_path: str | None = None,
) -> tuple[str, int, int]:
    """Write the FSLE file (atomically) and optional CSV twin.

    Returns (output path, record count, feature dim). The backbone name and
    pooled layer ride in the file's string table as provenance.
    """
    target = out_path or manifest.output
    if target is None:
        raise ExportError("no output path: pass --out or set manifest output")
    rows, width = compute_vectors(manifest)
    num_classes = max(r[3] for r in rows) + 1
    provenance = (f"backbone:{manifest.backbone}:avgpool",)
    blob = fsle_bytes(rows, dim=width, num_classes=num_classes, provenance=provenance)
    try:
        write_atomic(target, blob)
    except OSError as exc:
        raise ExportError(f"cannot write {target}: {exc}") from exc
    if csv_path is not None:
        try:
            write_csv(csv_path, rows, dim=width)
        except OSError as exc:
            raise ExportError(f"cannot write {csv_path}: {exc}") from exc
    return target, len(rows), width
