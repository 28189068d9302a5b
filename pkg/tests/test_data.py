"""Dataset ingestion tests: IDX fixtures, CSV, blobs, subsetting."""

import numpy as np
import pytest

from spongelab.data import (from_arrays, load_csv, load_dataset, load_idx,
                            subset, synth_blobs, write_idx_images,
                            write_idx_labels)
from spongelab.errors import ConfigError, DataError, DomainError

# ---------------------------------------------------------------------------
# IDX


def make_idx_fixture(tmp_path, n=4, h=28, w=28, labels=True):
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, size=(n, h, w)).astype(np.uint8)
    img_path = str(tmp_path / "images.idx")
    write_idx_images(img_path, images)
    lab_path = None
    if labels:
        lab_path = str(tmp_path / "labels.idx")
        write_idx_labels(lab_path, rng.integers(0, 10, size=n).astype(np.uint8))
    return img_path, lab_path, images


def test_idx_round_trip(tmp_path):
    img, lab, images = make_idx_fixture(tmp_path)
    ds = load_idx(img, lab, batch_size=2)
    assert ds.n_samples == 4
    assert ds.sample_shape == (1, 28, 28)
    flat = ds.flat_samples()
    assert flat.min() >= 0.0 and flat.max() <= 1.0
    np.testing.assert_allclose(flat[:, 0] * 255.0, images, atol=1e-4)


def test_idx_bad_magic(tmp_path):
    img, _, _ = make_idx_fixture(tmp_path, labels=False)
    with open(img, "r+b") as f:
        f.write(b"\xde\xad\xbe\xef")
    with pytest.raises(DataError) as exc:
        load_idx(img)
    assert "magic" in str(exc.value)


def test_idx_label_count_mismatch(tmp_path):
    img, _, _ = make_idx_fixture(tmp_path, labels=False)
    lab = str(tmp_path / "labels.idx")
    write_idx_labels(lab, np.zeros(7, np.uint8))
    with pytest.raises(DataError):
        load_idx(img, lab)


def test_idx_truncated_reports_offset(tmp_path):
    img, _, _ = make_idx_fixture(tmp_path, labels=False)
    with open(img, "rb") as f:
        data = f.read()
    with open(img, "wb") as f:
        f.write(data[:100])
    with pytest.raises(DataError) as exc:
        load_idx(img)
    assert "byte" in str(exc.value)


# ---------------------------------------------------------------------------
# CSV


def test_csv_loader(tmp_path):
    path = tmp_path / "table.csv"
    path.write_text("f1,f2,label\n0.5,1.5,0\n-1.0,2.0,1\n")
    ds = load_csv(str(path), label_column="label")
    assert ds.n_samples == 2
    assert ds.sample_shape == (2,)
    assert list(ds.flat_labels()) == [0, 1]


def test_csv_missing_label_column(tmp_path):
    path = tmp_path / "table.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(DataError):
        load_csv(str(path), label_column="label")


# ---------------------------------------------------------------------------
# blobs


def test_blobs_deterministic():
    a = synth_blobs(2, 10, 6, seed=5)
    b = synth_blobs(2, 10, 6, seed=5)
    assert np.array_equal(a.flat_samples(), b.flat_samples())
    assert np.array_equal(a.flat_labels(), b.flat_labels())
    c = synth_blobs(2, 10, 6, seed=6)
    assert not np.array_equal(a.flat_samples(), c.flat_samples())


def test_blobs_single_class():
    ds = synth_blobs(1, 8, 4, seed=0)
    assert set(ds.flat_labels().tolist()) == {0}


def test_blobs_image_shape():
    ds = synth_blobs(2, 6, (1, 8, 8), seed=0)
    assert ds.sample_shape == (1, 8, 8)


def test_blobs_classes_are_separated():
    ds = synth_blobs(2, 50, 16, seed=1, spread=5.0)
    x, y = ds.flat_samples(), ds.flat_labels()
    mu0, mu1 = x[y == 0].mean(axis=0), x[y == 1].mean(axis=0)
    # class means are far apart relative to the unit noise
    assert np.linalg.norm(mu0 - mu1) > 4.0


# ---------------------------------------------------------------------------
# subset


def test_subset_full_fraction_is_identity_multiset():
    ds = synth_blobs(2, 10, 4, seed=2)
    sub = subset(ds, 1.0, seed=0)
    assert sub.n_samples == ds.n_samples
    a = np.sort(ds.flat_samples().sum(axis=1))
    b = np.sort(sub.flat_samples().sum(axis=1))
    np.testing.assert_allclose(a, b, rtol=1e-6)


def test_subset_exact_count():
    ds = synth_blobs(2, 250, 4, seed=3)          # 500 samples
    sub = subset(ds, 0.01, seed=0)
    assert sub.n_samples == 5


def test_subset_deterministic():
    ds = synth_blobs(3, 30, 4, seed=4)
    a = subset(ds, 0.2, seed=9).flat_samples()
    b = subset(ds, 0.2, seed=9).flat_samples()
    assert np.array_equal(a, b)


def test_subset_stratification_within_one():
    ds = synth_blobs(4, 25, 4, seed=5)           # 100 samples, 25 per class
    sub = subset(ds, 0.2, seed=1)                # 20 requested, 5 per class
    _, counts = np.unique(sub.flat_labels(), return_counts=True)
    assert all(abs(c - 5) <= 1 for c in counts)
    assert counts.sum() == 20


def test_subset_fraction_bounds():
    ds = synth_blobs(2, 5, 4, seed=6)
    with pytest.raises(DomainError):
        subset(ds, 0.0, seed=0)
    with pytest.raises(DomainError):
        subset(ds, 1.5, seed=0)


# ---------------------------------------------------------------------------
# dispatch


def test_load_dataset_dispatch():
    ds = load_dataset({"kind": "blobs", "classes": 2, "samples_per_class": 5,
                       "shape": [4], "seed": 1, "batch_size": 5})
    assert ds.n_samples == 10
    with pytest.raises(ConfigError):
        load_dataset({"kind": "parquet"})


def test_from_arrays_validation():
    with pytest.raises(DomainError):
        from_arrays(np.zeros((0, 3), np.float32), None, 2)
