"""Export manifest: schema, parsing, validation."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field


class ManifestError(ValueError):
    """Manifest or mapping file is invalid; the message names the offender."""


@dataclass(frozen=True)
class ImageEntry:
    filename: str
    patient_id: str
    sequence_id: str
    frame_index: int
    label: int


@dataclass(frozen=True)
class ExportManifest:
    """Everything one export run needs.

    circles maps sequence_id -> (cx, cy, r) in pixels; the string "auto"
    (or a missing sequence) selects the centered circle of radius min(w,h)/2.
    """

    image_root: str
    backbone: str
    entries: tuple[ImageEntry, ...]
    output: str | None = None
    circles: dict = field(default_factory=dict)

    def image_path(self, entry: ImageEntry) -> str:
        return os.path.join(self.image_root, entry.filename)

    def circle_for(self, sequence_id: str):
        spec = self.circles.get(sequence_id)
        if spec is None or spec == "auto":
            return None
        return tuple(float(v) for v in spec)


def _load_mapping(path: str) -> tuple[ImageEntry, ...]:
    if not os.path.exists(path):
        raise ManifestError(f"mapping file not found: {path}")
    entries = []
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = ["filename", "patient_id", "sequence_id", "frame_index", "label"]
        if header != expected:
            raise ManifestError(f"mapping header must be {','.join(expected)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise ManifestError(f"mapping row {lineno}: expected 5 columns")
            try:
                frame = int(row[3])
                label = int(row[4])
            except ValueError:
                raise ManifestError(f"mapping row {lineno}: bad frame/label") from None
            if label not in (0, 1):
                raise ManifestError(f"mapping row {lineno}: label must be 0 or 1")
            if frame < 0:
                raise ManifestError(f"mapping row {lineno}: negative frame index")
            entries.append(ImageEntry(row[0], row[1], row[2], frame, label))
    if not entries:
        raise ManifestError(f"mapping file has no rows: {path}")
    return tuple(entries)


def load_manifest(path: str) -> ExportManifest:
    try:
        with open(path, "r") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from None

    allowed = {"image_root", "backbone", "output", "circles", "mapping"}
    unknown = set(raw) - allowed
    if unknown:
        raise ManifestError(f"unknown manifest key(s): {sorted(unknown)}")
    for key in ("image_root", "backbone", "mapping"):
        if key not in raw:
            raise ManifestError(f"manifest missing required key: {key}")

    base = os.path.dirname(os.path.abspath(path))

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    image_root = resolve(raw["image_root"])
    if not os.path.isdir(image_root):
        raise ManifestError(f"image root is not a directory: {image_root}")
    circles = raw.get("circles", "auto")
    if circles == "auto":
        circles = {}
    if not isinstance(circles, dict):
        raise ManifestError('circles must be "auto" or a {sequence_id: [cx, cy, r]} map')
    for seq, spec in circles.items():
        if spec != "auto" and (not isinstance(spec, (list, tuple)) or len(spec) != 3):
            raise ManifestError(f"circle for sequence {seq!r} must be [cx, cy, r]")

    entries = _load_mapping(resolve(raw["mapping"]))
    manifest = ExportManifest(
        image_root=image_root,
        backbone=raw["backbone"],
        entries=entries,
        output=resolve(raw["output"]) if "output" in raw else None,
        circles=circles,
    )
    missing = [
        e.filename for e in manifest.entries
        if not os.path.exists(manifest.image_path(e))
    ]
    if missing:
        raise ManifestError(f"mapped image(s) not found: {', '.join(missing)}")
    seen = set()
    for e in manifest.entries:
        ident = (e.patient_id, e.sequence_id, e.frame_index)
        if ident in seen:
            raise ManifestError(f"duplicate identity in mapping: {ident}")
        seen.add(ident)
    return manifest
