import io

import numpy as np
import pytest

from fslkit import embedio
from fslkit.datamodel import Dataset, EmbeddingRecord, validate_dataset
from fslkit.embedio import (
    BadMagic,
    DatasetEmpty,
    InvalidSynthSpec,
    MalformedRow,
    SynthSpec,
    TruncatedFile,
    UnsupportedVersion,
    read_csv,
    read_embeddings,
    synth_dataset,
    write_csv,
    write_embeddings,
)


def rec(pid, seq, frame, label, vec):
    return EmbeddingRecord(pid, seq, frame, label, np.array(vec, dtype=np.float32))


def small_dataset():
    records = (
        rec("pA", "s0", 0, 0, [0.25, -1.5]),
        rec("pA", "s0", 1, 1, [3.125, 0.0]),
        rec("pB", "s1", 0, 0, [1e-8, 42.0]),
    )
    return Dataset(records, dim=2, num_classes=2, name="small")


# ---------------------------------------------------------------------------
# binary format


def test_write_byte_count_single_record():
    # layout oracle: header is 4 magic + 5 u32 fields + string table;
    # each record is 4+4+4+1 bytes of identity plus D float32s
    ds = Dataset((rec("pA", "s0", 0, 0, [1.0, 2.0]),), dim=2, num_classes=2)
    strtab = "\n".join(["pA", "s0"]).encode()
    expected = (4 + 4 * 5 + len(strtab)) + (4 + 4 + 4 + 1 + 8)
    buf = io.BytesIO()
    written = write_embeddings(ds, buf)
    assert written == expected
    assert len(buf.getvalue()) == expected


def test_binary_round_trip_exact():
    ds = small_dataset()
    buf = io.BytesIO()
    write_embeddings(ds, buf)
    buf.seek(0)
    back = read_embeddings(buf, name="small")
    assert back == ds
    for a, b in zip(back.records, ds.records):
        assert a.vector.tobytes() == b.vector.tobytes()  # bit-exact float32


def test_empty_dataset_rejected():
    with pytest.raises(DatasetEmpty):
        write_embeddings(Dataset((), dim=2, num_classes=2), io.BytesIO())


def test_bad_magic():
    with pytest.raises(BadMagic):
        read_embeddings(io.BytesIO(b"NOPE" + b"\x00" * 40))


def test_unsupported_version():
    ds = small_dataset()
    buf = io.BytesIO()
    write_embeddings(ds, buf)
    blob = bytearray(buf.getvalue())
    blob[4] = 9  # version field
    with pytest.raises(UnsupportedVersion):
        read_embeddings(io.BytesIO(bytes(blob)))


def test_truncated_payload():
    ds = small_dataset()
    buf = io.BytesIO()
    write_embeddings(ds, buf)
    blob = buf.getvalue()
    with pytest.raises(TruncatedFile):
        read_embeddings(io.BytesIO(blob[:-5]))


def test_header_declares_more_records_than_payload():
    ds = Dataset(
        (rec("pA", "s0", 0, 0, [1.0, 2.0]), rec("pA", "s0", 1, 0, [3.0, 4.0])),
        dim=2,
        num_classes=1,
    )
    buf = io.BytesIO()
    write_embeddings(ds, buf)
    blob = buf.getvalue()
    record_size = 4 + 4 + 4 + 1 + 8
    with pytest.raises(TruncatedFile):
        read_embeddings(io.BytesIO(blob[:-record_size]))


def test_extra_string_table_names_are_ignored():
    ds = small_dataset()
    buf = io.BytesIO()
    write_embeddings(ds, buf, extra_names=("provenance:test",))
    buf.seek(0)
    assert read_embeddings(buf, name="small") == ds


def test_round_trip_randomized():
    rng = np.random.default_rng(123)
    for trial in range(10):
        n_pat = int(rng.integers(1, 5))
        dim = int(rng.integers(1, 9))
        records = []
        for p in range(n_pat):
            for f in range(int(rng.integers(1, 6))):
                records.append(
                    rec(
                        f"pat{p}",
                        f"seq{rng.integers(0, 3)}",
                        f,
                        int(rng.integers(0, 2)),
                        rng.normal(size=dim).astype(np.float32),
                    )
                )
        ds = Dataset(tuple(records), dim=dim, num_classes=2, name=f"t{trial}")
        buf = io.BytesIO()
        write_embeddings(ds, buf)
        buf.seek(0)
        assert read_embeddings(buf, name=ds.name) == ds


# ---------------------------------------------------------------------------
# CSV format


def test_csv_header_plus_one_row():
    text = "patient_id,sequence_id,frame_index,label,e0,e1\npA,s0,3,1,0.5,-0.25\n"
    ds = read_csv(io.StringIO(text))
    assert len(ds) == 1 and ds.dim == 2
    assert ds.records[0].identity == ("pA", "s0", 3)


def test_csv_short_row_rejected():
    text = "patient_id,sequence_id,frame_index,label,e0,e1\npA,s0,3,1,0.5\n"
    with pytest.raises(MalformedRow) as err:
        read_csv(io.StringIO(text))
    assert err.value.row == 2


def test_csv_round_trip_within_1e6_relative():
    ds = small_dataset()
    buf = io.StringIO()
    write_csv(ds, buf)
    back = read_csv(io.StringIO(buf.getvalue()), name="small")
    for a, b in zip(back.records, ds.records):
        np.testing.assert_allclose(a.vector, b.vector, rtol=1e-6)


def test_csv_round_trip_is_exact_for_float32():
    # 9 significant digits round-trip IEEE float32 exactly
    rng = np.random.default_rng(7)
    records = tuple(
        rec("p", "s", i, 0, (rng.normal(size=3) * 10.0 ** rng.integers(-6, 7)))
        for i in range(50)
    )
    ds = Dataset(records, dim=3, num_classes=1)
    buf = io.StringIO()
    write_csv(ds, buf)
    back = read_csv(io.StringIO(buf.getvalue()))
    for a, b in zip(back.records, ds.records):
        assert a.vector.tobytes() == b.vector.tobytes()


def test_csv_bad_header():
    with pytest.raises(MalformedRow):
        read_csv(io.StringIO("a,b,c\n1,2,3\n"))


# ---------------------------------------------------------------------------
# synthetic generator


def test_synth_record_count():
    spec = SynthSpec(5, 10, 4, 1.0, 0.5, 0.5, malignant_patient_fraction=1.0)
    ds = synth_dataset(spec, seed=0)
    assert len(ds) == 5 * 10 * 2
    assert validate_dataset(ds).ok


def test_synth_deterministic():
    spec = SynthSpec(4, 6, 8, 2.0, 1.0, 0.7)
    a = synth_dataset(spec, seed=42)
    b = synth_dataset(spec, seed=42)
    assert a == b
    assert a.vectors.tobytes() == b.vectors.tobytes()
    c = synth_dataset(spec, seed=43)
    assert c.vectors.tobytes() != a.vectors.tobytes()


def test_synth_class_means_concentrate():
    # patient_sigma=0, small noise: per-class sample means land within
    # 3*noise_sigma/sqrt(n) of the true means along every axis
    noise = 0.05
    spec = SynthSpec(6, 50, 8, class_separation=10.0, patient_sigma=0.0, noise_sigma=noise)
    ds = synth_dataset(spec, seed=9)
    vectors = ds.vectors.astype(np.float64)
    labels = ds.labels
    bound = 3 * noise / np.sqrt((labels == 0).sum())
    mean0 = vectors[labels == 0].mean(axis=0)
    mean1 = vectors[labels == 1].mean(axis=0)
    assert np.all(np.abs(mean0) < bound)
    expected1 = np.zeros(8)
    expected1[0] = 10.0
    assert np.all(np.abs(mean1 - expected1) < bound)


def test_synth_malignant_fraction():
    spec = SynthSpec(10, 3, 4, 1.0, 0.5, 0.5, malignant_patient_fraction=0.25)
    ds = synth_dataset(spec, seed=1)
    with_malignant = {r.patient_id for r in ds.records if r.label == 1}
    assert len(with_malignant) == 3  # ceil(0.25 * 10)
    assert len(ds.patients) == 10


def test_synth_patient_offset_shared_across_frames():
    # noise_sigma -> tiny: every frame of one patient sits at the same offset
    spec = SynthSpec(4, 5, 6, class_separation=0.0, patient_sigma=2.0, noise_sigma=1e-9)
    ds = synth_dataset(spec, seed=3)
    for pid in ds.patients:
        vecs = np.array([r.vector for r in ds.records if r.patient_id == pid])
        assert np.allclose(vecs, vecs[0], atol=1e-5)


def test_synth_patient_sigma_widens_patient_spread():
    # Monte-Carlo with a fixed seed schedule: larger patient_sigma gives
    # larger between-patient distances within class 0
    def spread(psigma, seed):
        spec = SynthSpec(8, 20, 6, 1.0, psigma, 0.5)
        ds = synth_dataset(spec, seed=seed)
        means = []
        for pid in ds.patients:
            v = np.array(
                [r.vector for r in ds.records if r.patient_id == pid and r.label == 0]
            )
            means.append(v.mean(axis=0))
        means = np.array(means)
        return np.mean(
            [np.linalg.norm(a - b) for i, a in enumerate(means) for b in means[i + 1:]]
        )

    lows = [spread(0.5, s) for s in range(5)]
    highs = [spread(2.5, s) for s in range(5)]
    assert all(h > l for h, l in zip(highs, lows))


def test_synth_spec_validation_names_field():
    with pytest.raises(InvalidSynthSpec) as err:
        SynthSpec(0, 1, 4, 1.0, 0.1, 0.1).validate()
    assert err.value.field_name == "num_patients"
    with pytest.raises(InvalidSynthSpec):
        SynthSpec(2, 1, 4, 1.0, 0.1, 0.0).validate()  # noise_sigma must be > 0


def test_file_helpers_round_trip(tmp_path):
    ds = small_dataset()
    fsle = tmp_path / "d.fsle"
    csvp = tmp_path / "d.csv"
    embedio.write_embeddings_file(ds, fsle)
    embedio.write_csv_file(ds, csvp)
    assert embedio.read_embeddings_file(fsle, name="small") == ds
    back = embedio.read_csv_file(csvp, name="small")
    assert back == ds
