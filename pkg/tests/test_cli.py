import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from fslkit import embedio
from fslkit.cli import main, parse_config, ConfigError
from fslkit.episodic import RunReport


def run_cli(*argv):
    return main(list(argv))


def read_text(path):
    with open(path) as fh:
        return fh.read()


SYNTH_ARGS = [
    "synth", "--patients", "6", "--frames", "20", "--dim", "8", "--sep", "6",
    "--psigma", "0.5", "--nsigma", "1", "--seed", "7",
]


# ---------------------------------------------------------------------------
# synth


def test_synth_writes_readable_file(tmp_path):
    out = tmp_path / "vf_like.fsle"
    assert run_cli(*SYNTH_ARGS, "--out", str(out)) == 0
    ds = embedio.read_embeddings_file(out)
    assert len(ds) == 6 * 20 * 2 and ds.dim == 8


def test_synth_invalid_spec_exit_2(tmp_path, capsys):
    code = run_cli(
        "synth", "--patients", "0", "--frames", "5", "--dim", "4", "--sep", "1",
        "--psigma", "0", "--nsigma", "1", "--out", str(tmp_path / "x.fsle"),
    )
    assert code == 2
    assert "num_patients" in capsys.readouterr().err


def test_synth_deterministic_bytes(tmp_path):
    a, b = tmp_path / "a.fsle", tmp_path / "b.fsle"
    run_cli(*SYNTH_ARGS, "--out", str(a))
    run_cli(*SYNTH_ARGS, "--out", str(b))
    assert a.read_bytes() == b.read_bytes()


def test_synth_unwritable_out_exit_3(tmp_path):
    assert run_cli(*SYNTH_ARGS, "--out", str(tmp_path / "missing_dir" / "x.fsle")) == 3


# ---------------------------------------------------------------------------
# embed


def write_png(path, arr):
    from PIL import Image

    Image.fromarray((np.clip(arr, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def make_image_dir(tmp_path, names):
    rng = np.random.default_rng(0)
    d = tmp_path / "imgs"
    d.mkdir()
    for name in names:
        write_png(d / name, rng.random((64, 64)))
    return d


def test_embed_produces_expected_dim(tmp_path):
    d = make_image_dir(tmp_path, ["pa_s0_0.png", "pa_s0_1.png", "pb_s1_0.png"])
    out = tmp_path / "img.fsle"
    assert run_cli("embed", "--images", str(d), "--grid", "4", "--out", str(out)) == 0
    ds = embedio.read_embeddings_file(out)
    assert len(ds) == 3 and ds.dim == 48  # 3 * 4^2


def test_embed_bad_filename_exit_2(tmp_path, capsys):
    d = make_image_dir(tmp_path, ["foo.png"])
    code = run_cli("embed", "--images", str(d), "--grid", "2", "--out", str(tmp_path / "o.fsle"))
    assert code == 2
    assert "foo.png" in capsys.readouterr().err


def test_embed_identical_images_identical_vectors(tmp_path):
    rng = np.random.default_rng(1)
    d = tmp_path / "imgs"
    d.mkdir()
    arr = rng.random((48, 48))
    write_png(d / "pa_s0_0.png", arr)
    write_png(d / "pa_s0_1.png", arr)
    out = tmp_path / "o.fsle"
    assert run_cli("embed", "--images", str(d), "--grid", "3", "--out", str(out)) == 0
    ds = embedio.read_embeddings_file(out)
    assert ds.records[0].vector.tobytes() == ds.records[1].vector.tobytes()


def test_embed_with_labels(tmp_path):
    d = make_image_dir(tmp_path, ["pa_s0_0.png", "pb_s1_0.png"])
    labels = tmp_path / "labels.csv"
    labels.write_text("filename,label\npa_s0_0.png,0\npb_s1_0.png,1\n")
    out = tmp_path / "o.fsle"
    assert run_cli(
        "embed", "--images", str(d), "--grid", "2", "--labels", str(labels),
        "--out", str(out),
    ) == 0
    ds = embedio.read_embeddings_file(out)
    assert [r.label for r in ds.records] == [0, 1]
    assert ds.num_classes == 2


# ---------------------------------------------------------------------------
# run / transfer / report


def small_config(tmp_path, heads=("protonet", "simpleshot"), eval_episodes=20):
    cfg = {
        "dataset": {
            "synth": {
                "num_patients": 6, "frames_per_patient_per_class": 15, "dim": 8,
                "class_separation": 6.0, "patient_sigma": 0.5, "noise_sigma": 1.0,
                "seed": 3,
            }
        },
        "episode": {"way": 2, "shot": 3, "query": 5},
        "train": {"episodes": 5, "lr": 1e-3, "seed": 1},
        "eval": {"episodes": eval_episodes},
        "cv": {"k": 3},
        "heads": list(heads),
    }
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_run_outputs(tmp_path):
    cfg = small_config(tmp_path)
    out = tmp_path / "run"
    assert run_cli("run", "--config", str(cfg), "--out", str(out)) == 0
    summary = read_text(out / "summary.csv").splitlines()
    assert summary[0] == "head,median,q1,q3"
    assert len(summary) == 3  # 2 heads
    reports = sorted((out / "reports").glob("*.json"))
    assert len(reports) == 6  # 2 heads x 3 folds
    rep = RunReport.from_json(read_text(reports[0]))
    assert rep.consistent()
    assert (out / "config.json").exists()
    medians = read_text(out / "fold_medians.csv").splitlines()
    assert medians[0] == "head,fold,median"
    assert len(medians) == 7


def test_run_deterministic_summary_bytes(tmp_path):
    cfg = small_config(tmp_path, heads=("protonet",))
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert run_cli("run", "--config", str(cfg), "--out", str(out1)) == 0
    assert run_cli("run", "--config", str(cfg), "--out", str(out2)) == 0
    assert (out1 / "summary.csv").read_bytes() == (out2 / "summary.csv").read_bytes()


def test_run_separable_heads_score_high(tmp_path):
    cfg = small_config(tmp_path, heads=("protonet",), eval_episodes=30)
    out = tmp_path / "run"
    assert run_cli("run", "--config", str(cfg), "--out", str(out)) == 0
    rows = list(csv.DictReader(open(out / "summary.csv")))
    assert float(rows[0]["median"]) >= 0.95


def test_run_unknown_config_key_exit_2(tmp_path, capsys):
    raw = json.loads(read_text(small_config(tmp_path)))
    raw["unknown_section"] = {}
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(raw))
    assert run_cli("run", "--config", str(path), "--out", str(tmp_path / "o")) == 2
    assert "unknown_section" in capsys.readouterr().err


def test_run_missing_config_exit_3(tmp_path):
    assert run_cli("run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")) == 3


def test_run_infeasible_exit_4(tmp_path):
    cfg = {
        "dataset": {
            "synth": {
                "num_patients": 2, "frames_per_patient_per_class": 3, "dim": 4,
                "class_separation": 1.0, "patient_sigma": 0.1, "noise_sigma": 1.0,
                "seed": 0,
            }
        },
        "episode": {"shot": 5, "query": 10},  # 3 frames per class can't give 5 shots
        "train": {"episodes": 2, "seed": 0},
        "eval": {"episodes": 2},
        "cv": {"k": 2},
        "heads": ["protonet"],
    }
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert run_cli("run", "--config", str(path), "--out", str(tmp_path / "o")) == 4


def test_transfer_flow(tmp_path):
    a, b = tmp_path / "a.fsle", tmp_path / "b.fsle"
    run_cli(*SYNTH_ARGS, "--out", str(a))
    run_cli(
        "synth", "--patients", "5", "--frames", "15", "--dim", "8", "--sep", "6",
        "--psigma", "4", "--nsigma", "1", "--seed", "9", "--out", str(b),
    )
    cfg = small_config(tmp_path, heads=("protonet",))
    out = tmp_path / "transfer"
    assert run_cli(
        "transfer", "--train-data", str(a), "--eval-data", str(b),
        "--config", str(cfg), "--out", str(out),
    ) == 0
    reports = list((out / "reports").glob("*.json"))
    assert len(reports) == 1
    rep = RunReport.from_json(read_text(reports[0]))
    assert rep.train_dataset == "a" and rep.eval_dataset == "b"


def test_transfer_missing_eval_file_exit_3(tmp_path):
    a = tmp_path / "a.fsle"
    run_cli(*SYNTH_ARGS, "--out", str(a))
    cfg = small_config(tmp_path)
    assert run_cli(
        "transfer", "--train-data", str(a), "--eval-data", str(tmp_path / "nope.fsle"),
        "--config", str(cfg), "--out", str(tmp_path / "o"),
    ) == 3


def test_report_aggregates_and_pca(tmp_path):
    cfg = small_config(tmp_path)
    run_dir = tmp_path / "run"
    assert run_cli("run", "--config", str(cfg), "--out", str(run_dir)) == 0
    data = tmp_path / "d.fsle"
    run_cli(*SYNTH_ARGS, "--out", str(data))
    table = tmp_path / "table.csv"
    assert run_cli(
        "report", "--runs", str(run_dir / "reports"), "--out", str(table),
        "--data", str(data),
    ) == 0
    rows = list(csv.DictReader(open(table)))
    assert len(rows) == 2  # one row per head
    assert {r["head"] for r in rows} == {"protonet", "simpleshot"}
    assert all(int(r["folds"]) == 3 for r in rows)
    pca_rows = list(csv.DictReader(open(tmp_path / "d_pca.csv")))
    assert list(pca_rows[0]) == ["x", "y", "patient_id", "label"]
    assert len(pca_rows) == 6 * 20 * 2


def test_report_empty_dir_exit_2(tmp_path, capsys):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run_cli("report", "--runs", str(empty), "--out", str(tmp_path / "t.csv")) == 2
    assert "no reports" in capsys.readouterr().err


def test_report_malformed_json_exit_2(tmp_path):
    d = tmp_path / "runs"
    d.mkdir()
    (d / "bad.json").write_text("{\"half\": true}")
    assert run_cli("report", "--runs", str(d), "--out", str(tmp_path / "t.csv")) == 2


def test_pca_patient_clusters_dominate_when_psigma_large(tmp_path):
    # patient_sigma >> class_separation: on PC1 the within-patient variance
    # must fall below the between-patient variance
    from fslkit.embedio import SynthSpec, synth_dataset
    from fslkit.reporting import pca_project

    ds = synth_dataset(
        SynthSpec(8, 25, 12, class_separation=0.5, patient_sigma=5.0, noise_sigma=1.0),
        seed=11,
    )
    coords = pca_project(ds)
    pc1 = coords[:, 0]
    patients = np.array([r.patient_id for r in ds.records])
    overall_mean = pc1.mean()
    within = 0.0
    between = 0.0
    for p in np.unique(patients):
        sel = pc1[patients == p]
        within += ((sel - sel.mean()) ** 2).sum()
        between += len(sel) * (sel.mean() - overall_mean) ** 2
    assert between > within


def test_fsl_threads_env(tmp_path, monkeypatch):
    from fslkit.cli import worker_count

    monkeypatch.delenv("FSL_THREADS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("FSL_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("FSL_THREADS", "0")
    assert worker_count() >= 1  # auto: one per CPU
    monkeypatch.setenv("FSL_THREADS", "soup")
    with pytest.raises(ConfigError):
        worker_count()

    # parallel evaluation must not change the summary bytes
    cfg = small_config(tmp_path, heads=("protonet",))
    out1, out2 = tmp_path / "seq", tmp_path / "par"
    monkeypatch.delenv("FSL_THREADS", raising=False)
    assert run_cli("run", "--config", str(cfg), "--out", str(out1)) == 0
    monkeypatch.setenv("FSL_THREADS", "4")
    assert run_cli("run", "--config", str(cfg), "--out", str(out2)) == 0
    assert (out1 / "summary.csv").read_bytes() == (out2 / "summary.csv").read_bytes()


def test_config_rejects_unknown_head():
    with pytest.raises(ConfigError):
        parse_config(
            {
                "dataset": {"path": "x.fsle"},
                "heads": ["protonet", "resnet"],
            }
        )


def test_console_script_entrypoint(tmp_path):
    out = tmp_path / "cli.fsle"
    proc = subprocess.run(
        [sys.executable, "-m", "fslkit.cli", *SYNTH_ARGS[1:], "--out", str(out)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode != 0  # no subcommand given

    proc = subprocess.run(
        [sys.executable, "-m", "fslkit.cli", *SYNTH_ARGS, "--out", str(out)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert out.exists()
