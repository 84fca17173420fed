"""Aggregation tables, box-plot data, and 2-D PCA exports for run reports."""
from __future__ import annotations

import csv
from collections import defaultdict

import numpy as np

from .datamodel import Dataset
from .episodic import RunReport


def summary_rows(reports: list[RunReport]) -> list[dict]:
    """Per-head median/quartiles over the pooled per-episode accuracies."""
    by_head: dict[str, list[float]] = defaultdict(list)
    order: list[str] = []
    for rep in reports:
        if rep.head not in by_head:
            order.append(rep.head)
        by_head[rep.head].extend(rep.episode_accuracies)
    rows = []
    for head in order:
        accs = np.array(by_head[head])
        rows.append(
            {
                "head": head,
                "median": float(np.median(accs)),
                "q1": float(np.percentile(accs, 25)),
                "q3": float(np.percentile(accs, 75)),
            }
        )
    return rows


def write_summary_csv(path, reports: list[RunReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["head", "median", "q1", "q3"])
        for row in summary_rows(reports):
            writer.writerow(
                [row["head"], f"{row['median']:.6f}", f"{row['q1']:.6f}", f"{row['q3']:.6f}"]
            )


def write_fold_medians_csv(path, reports: list[RunReport]) -> None:
    """One row per (head, fold) median: the box-plot distribution data."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["head", "fold", "median"])
        for rep in reports:
            fold = -1 if rep.fold_id is None else rep.fold_id
            writer.writerow([rep.head, fold, f"{rep.median:.6f}"])


def aggregate_table(reports: list[RunReport]) -> list[dict]:
    """Merge reports grouped by (head, train_dataset, eval_dataset).

    Each group aggregates its per-fold medians: the group median plus the
    quartiles of the fold medians.
    """
    groups: dict[tuple[str, str, str], list[float]] = defaultdict(list)
    order: list[tuple[str, str, str]] = []
    for rep in reports:
        key = (rep.head, rep.train_dataset, rep.eval_dataset)
        if key not in groups:
            order.append(key)
        groups[key].append(rep.median)
    rows = []
    for key in order:
        medians = np.array(groups[key])
        rows.append(
            {
                "head": key[0],
                "train_dataset": key[1],
                "eval_dataset": key[2],
                "folds": len(medians),
                "median": float(np.median(medians)),
                "q1": float(np.percentile(medians, 25)),
                "q3": float(np.percentile(medians, 75)),
            }
        )
    return rows


def write_aggregate_csv(path, reports: list[RunReport]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["head", "train_dataset", "eval_dataset", "folds", "median", "q1", "q3"]
        )
        for row in aggregate_table(reports):
            writer.writerow(
                [
                    row["head"],
                    row["train_dataset"],
                    row["eval_dataset"],
                    row["folds"],
                    f"{row['median']:.6f}",
                    f"{row['q1']:.6f}",
                    f"{row['q3']:.6f}",
                ]
            )


def pca_project(dataset: Dataset) -> np.ndarray:
    """First two principal components of the record vectors, (N, 2).

    Component signs are fixed so the largest-magnitude loading of each axis
    is positive, keeping the export stable across library versions.
    """
    x = dataset.vectors.astype(np.float64)
    x = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(x, full_matrices=False)
    comps = vt[:2] if vt.shape[0] >= 2 else np.vstack([vt, np.zeros((2 - vt.shape[0], vt.shape[1]))])
    for i in range(2):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return x @ comps.T


def write_pca_csv(path, dataset: Dataset) -> None:
    coords = pca_project(dataset)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "patient_id", "label"])
        for rec, (x, y) in zip(dataset.records, coords):
            writer.writerow([f"{x:.6f}", f"{y:.6f}", rec.patient_id, rec.label])
