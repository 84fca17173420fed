"""fsl-export command line: export --manifest manifest.json --out data.fsle."""
from __future__ import annotations

import argparse
import sys

from .backbone import BackboneUnavailable
from .export import ExportError, export_embeddings
from .manifest import ManifestError, load_manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsl-export",
        description="Export image folders to FSLE embedding files via a CNN backbone.",
    )
    parser.add_argument("--manifest", required=True, help="export manifest JSON")
    parser.add_argument("--out", default=None,
                        help="output .fsle path (overrides manifest output)")
    parser.add_argument("--csv", default=None, help="optional CSV twin output")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manifest = load_manifest(args.manifest)
        target, count, width = export_embeddings(manifest, args.out, args.csv)
    except (ManifestError, BackboneUnavailable, ExportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"exported {count} embeddings (dim {width}) to {target}")
    if args.csv:
        print(f"wrote CSV twin to {args.csv}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
