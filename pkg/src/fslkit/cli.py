"""Command-line surface: synth, embed, run, transfer, report.

Exit codes: 0 success, 2 config/spec errors, 3 I/O failures, 4 infeasible
episodes. The FSL_THREADS environment variable caps evaluation parallelism
(unset = single-threaded, 0 = one worker per CPU).
"""
from __future__ import annotations

import argparse
import json
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import embedio, imageprep, reporting
from .datamodel import Dataset, EmbeddingRecord, FoldCountExceedsPatients
from .embedio import InvalidSynthSpec, SynthSpec
from .episodic import (
    EpisodeConfig,
    InfeasibleEpisode,
    NotEnoughPatients,
    ReportFormatError,
    RunReport,
    TrainConfig,
    cross_validate,
    transfer,
)
from .heads import HEAD_IDS

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INFEASIBLE = 4


class ConfigError(ValueError):
    pass


def worker_count() -> int:
    """Parallelism cap from FSL_THREADS (unset -> 1, 0 -> auto)."""
    raw = os.environ.get("FSL_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"FSL_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError("FSL_THREADS must be >= 0")
    return os.cpu_count() or 1 if n == 0 else n


# ---------------------------------------------------------------------------
# experiment config


_SYNTH_KEYS = {
    "num_patients": int,
    "frames_per_patient_per_class": int,
    "dim": int,
    "class_separation": float,
    "patient_sigma": float,
    "noise_sigma": float,
    "malignant_patient_fraction": float,
    "seed": int,
}


def _check_keys(section: str, data: dict, allowed: set[str]) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {sorted(unknown)}")


def parse_config(raw: dict, require_dataset: bool = True):
    """Validate the experiment config document; unknown keys are rejected."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    _check_keys("config", raw, {"dataset", "episode", "train", "eval", "cv", "heads"})
    if require_dataset and "dataset" not in raw:
        raise ConfigError("config requires a dataset section")

    ds = raw.get("dataset")
    if ds is not None:
        _check_keys("dataset", ds, {"path", "synth", "name"})
        if ("path" in ds) == ("synth" in ds):
            raise ConfigError("dataset section needs exactly one of path/synth")
        if "synth" in ds:
            _check_keys("dataset.synth", ds["synth"], set(_SYNTH_KEYS))
            for key, typ in _SYNTH_KEYS.items():
                if key in ds["synth"]:
                    ds["synth"][key] = typ(ds["synth"][key])

    ep = dict(raw.get("episode", {}))
    _check_keys("episode", ep, {"way", "shot", "query"})
    tr = dict(raw.get("train", {}))
    _check_keys("train", tr, {"episodes", "lr", "seed", "adapter_dim"})
    ev = dict(raw.get("eval", {}))
    _check_keys("eval", ev, {"episodes"})
    cv = dict(raw.get("cv", {}))
    _check_keys("cv", cv, {"k"})
    heads = raw.get("heads", list(HEAD_IDS))
    if not isinstance(heads, list) or not heads:
        raise ConfigError("heads must be a non-empty list")
    for head in heads:
        if head not in HEAD_IDS:
            raise ConfigError(f"unknown head {head!r}; valid: {list(HEAD_IDS)}")

    try:
        ecfg = EpisodeConfig(
            way=int(ep.get("way", 2)),
            shot=int(ep.get("shot", 5)),
            query=int(ep.get("query", 10)),
        )
        tcfg = TrainConfig(
            train_episodes=int(tr.get("episodes", 500)),
            eval_episodes=int(ev.get("episodes", 500)),
            learning_rate=float(tr.get("lr", 1e-4)),
            seed=int(tr.get("seed", 0)),
            adapter_dim=(
                int(tr["adapter_dim"]) if tr.get("adapter_dim") is not None else None
            ),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    k = int(cv.get("k", 5))
    if k < 2:
        raise ConfigError("cv.k must be >= 2")
    return ds, ecfg, tcfg, k, list(heads)


def load_config(path) -> dict:
    try:
        with open(path, "r") as fh:
            text = fh.read()
    except OSError as exc:
        raise exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None


def _dataset_from_section(ds: dict) -> Dataset:
    if "path" in ds:
        return embedio.read_embeddings_file(ds["path"], name=ds.get("name"))
    synth = dict(ds["synth"])
    seed = synth.pop("seed", 0)
    spec = SynthSpec(**synth)
    return embedio.synth_dataset(spec, seed, name=ds.get("name", "synth"))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = SynthSpec(
        num_patients=args.patients,
        frames_per_patient_per_class=args.frames,
        dim=args.dim,
        class_separation=args.sep,
        patient_sigma=args.psigma,
        noise_sigma=args.nsigma,
        malignant_patient_fraction=args.mfrac,
    )
    dataset = embedio.synth_dataset(spec, args.seed, name=Path(args.out).stem)
    embedio.write_embeddings_file(dataset, args.out)
    print(f"wrote {len(dataset)} records (dim {dataset.dim}) to {args.out}")
    return EXIT_OK


_IMAGE_NAME = re.compile(r"^(?P<patient>.+)_(?P<sequence>[^_]+)_(?P<frame>\d+)\.png$")


def _parse_circle(spec: str):
    if spec == "auto":
        return None
    parts = spec.split(",")
    if len(parts) != 3:
        raise ConfigError(f"--circle must be 'auto' or cx,cy,r; got {spec!r}")
    try:
        cx, cy, r = (float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"--circle values must be numeric: {spec!r}") from None
    return imageprep.FovCircle(cx, cy, r)


def _load_labels(path) -> dict[str, int]:
    import csv as _csv

    labels: dict[str, int] = {}
    with open(path, "r", newline="") as fh:
        for i, row in enumerate(_csv.reader(fh), start=1):
            if i == 1 and row == ["filename", "label"]:
                continue
            if len(row) != 2:
                raise ConfigError(f"labels file row {i}: expected filename,label")
            try:
                labels[row[0]] = int(row[1])
            except ValueError:
                raise ConfigError(f"labels file row {i}: bad label {row[1]!r}") from None
    return labels


def cmd_embed(args) -> int:
    circle = _parse_circle(args.circle)
    image_dir = Path(args.images)
    if not image_dir.is_dir():
        raise FileNotFoundError(f"not a directory: {image_dir}")
    pngs = sorted(p for p in image_dir.iterdir() if p.suffix.lower() == ".png")
    if not pngs:
        raise ConfigError(f"no .png files in {image_dir}")
    bad = [p.name for p in pngs if not _IMAGE_NAME.match(p.name)]
    if bad:
        raise ConfigError(
            "filenames must look like patient_sequence_frame.png; offenders: "
            + ", ".join(bad)
        )
    labels = _load_labels(args.labels) if args.labels else {}
    if args.labels:
        missing = [p.name for p in pngs if p.name not in labels]
        if missing:
            raise ConfigError(f"labels file missing entries for: {', '.join(missing)}")

    records = []
    for path in pngs:
        m = _IMAGE_NAME.match(path.name)
        image = imageprep.load_png(path)
        fov = circle if circle is not None else imageprep.FovCircle.auto(image)
        cropped = imageprep.crop_fov(image, fov)
        matrix = imageprep.normalize_resize(cropped)
        vec = imageprep.patch_featurize(matrix, args.grid)
        records.append(
            EmbeddingRecord(
                patient_id=m.group("patient"),
                sequence_id=m.group("sequence"),
                frame_index=int(m.group("frame")),
                label=labels.get(path.name, 0),
                vector=vec.astype(np.float32),
            )
        )
    num_classes = max((r.label for r in records), default=0) + 1
    dataset = Dataset(
        tuple(records),
        dim=3 * args.grid * args.grid,
        num_classes=num_classes,
        name=Path(args.out).stem,
    )
    embedio.write_embeddings_file(dataset, args.out)
    print(f"embedded {len(records)} images (dim {dataset.dim}) to {args.out}")
    return EXIT_OK


def _write_run_outputs(out_dir: Path, reports: list[RunReport], raw_config: dict) -> None:
    reports_dir = out_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    for rep in reports:
        fold = "all" if rep.fold_id is None else f"fold{rep.fold_id}"
        path = reports_dir / f"{rep.head}_{fold}.json"
        path.write_text(rep.to_json() + "\n")
    reporting.write_summary_csv(out_dir / "summary.csv", reports)
    reporting.write_fold_medians_csv(out_dir / "fold_medians.csv", reports)
    (out_dir / "config.json").write_text(json.dumps(raw_config, indent=2) + "\n")


def cmd_run(args) -> int:
    raw = load_config(args.config)
    ds_section, ecfg, tcfg, k, head_list = parse_config(raw)
    dataset = _dataset_from_section(ds_section)
    workers = worker_count()
    out_dir = Path(args.out)
    reports: list[RunReport] = []
    for head in head_list:
        reports.extend(cross_validate(head, dataset, k, tcfg, ecfg, workers=workers))
    _write_run_outputs(out_dir, reports, raw)
    for row in reporting.summary_rows(reports):
        print(f"{row['head']}: median {row['median']:.3f} (q1 {row['q1']:.3f}, q3 {row['q3']:.3f})")
    return EXIT_OK


def cmd_transfer(args) -> int:
    raw = load_config(args.config)
    _, ecfg, tcfg, _, head_list = parse_config(raw, require_dataset=False)
    train_ds = embedio.read_embeddings_file(args.train_data)
    eval_ds = embedio.read_embeddings_file(args.eval_data)
    workers = worker_count()
    out_dir = Path(args.out)
    reports = [
        transfer(head, train_ds, eval_ds, tcfg, ecfg, workers=workers)
        for head in head_list
    ]
    _write_run_outputs(out_dir, reports, raw)
    for row in reporting.summary_rows(reports):
        print(f"{row['head']}: median {row['median']:.3f} on {eval_ds.name}")
    return EXIT_OK


def cmd_report(args) -> int:
    out_path = Path(args.out)
    reports: list[RunReport] = []
    if args.runs:
        runs_dir = Path(args.runs)
        if not runs_dir.is_dir():
            raise FileNotFoundError(f"not a directory: {runs_dir}")
        for path in sorted(runs_dir.rglob("*.json")):
            if path.name == "config.json":
                continue
            reports.append(RunReport.from_json(path.read_text()))
        if not reports:
            raise ConfigError(f"no reports found in {runs_dir}")
        reporting.write_aggregate_csv(out_path, reports)
        print(f"aggregated {len(reports)} reports into {out_path}")
    elif not args.data:
        raise ConfigError("report needs --runs and/or --data")
    for data_path in args.data or []:
        dataset = embedio.read_embeddings_file(data_path)
        pca_path = out_path.parent / f"{Path(data_path).stem}_pca.csv"
        reporting.write_pca_csv(pca_path, dataset)
        print(f"wrote PCA projection of {dataset.name} to {pca_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fslkit",
        description="Few-shot metric learning over patient-grouped embeddings.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic clustered dataset")
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--frames", type=int, required=True,
                   help="frames per patient per class")
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--sep", type=float, required=True, help="class separation")
    p.add_argument("--psigma", type=float, required=True, help="patient offset std")
    p.add_argument("--nsigma", type=float, required=True, help="per-frame noise std")
    p.add_argument("--mfrac", type=float, default=1.0,
                   help="fraction of patients carrying the malignant class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("embed", help="featurize a directory of grayscale PNGs")
    p.add_argument("--images", required=True)
    p.add_argument("--grid", type=int, required=True)
    p.add_argument("--circle", default="auto", help="auto or cx,cy,r")
    p.add_argument("--labels", default=None,
                   help="optional CSV filename,label (default: all label 0)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("run", help="cross-validated episodic run per head")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("transfer", help="train on one dataset, evaluate on another")
    p.add_argument("--train-data", required=True)
    p.add_argument("--eval-data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("report", help="aggregate run reports and export PCA data")
    p.add_argument("--runs", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--data", action="append", default=None,
                   help="dataset file(s) to project with PCA (repeatable)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        ConfigError,
        InvalidSynthSpec,
        ReportFormatError,
        FoldCountExceedsPatients,
        NotEnoughPatients,
        embedio.ValidationFailed,
        embedio.MalformedRow,
        embedio.DatasetEmpty,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfeasibleEpisode as exc:
        print(f"error: infeasible episodes: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (
        OSError,
        embedio.SinkFailure,
        embedio.BadMagic,
        embedio.UnsupportedVersion,
        embedio.TruncatedFile,
        embedio.DimensionMismatch,
        embedio.EmbedIOError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
