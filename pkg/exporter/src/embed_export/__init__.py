"""Batch exporter: image folders -> FSLE embedding files via a CNN backbone.

The exporter consumes a JSON manifest (image root, backbone name, circle
parameters, a filename -> identity/label mapping) and emits the binary
embedding format the few-shot pipeline ingests, plus an optional CSV twin.
Inference runs without augmentation, so exports are deterministic.
"""

from .manifest import ExportManifest, ManifestError
from .export import ExportError, export_embeddings

__version__ = "0.1.0"

__all__ = ["ExportManifest", "ManifestError", "ExportError", "export_embeddings"]
