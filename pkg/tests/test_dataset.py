"""Dataset generation, splits, augmentation, domain distortion, file IO."""

import numpy as np
import pytest

from conftest import fast_dataset
from oximap.dataset import (
    HEADER_BYTES,
    TRAILER_BYTES,
    Dataset,
    DistortionSpec,
    augment_noise,
    balanced_batches,
    export_csv,
    load_dataset,
    make_pseudo_real,
    random_split,
    save_dataset,
    stratified_split,
)
from oximap.errors import DataError, DataFormatError, ShapeError
from oximap.rng import substream


def test_generated_rows_are_normalized(small_dataset):
    ds = small_dataset
    assert len(ds) == 64 and ds.bands == 16
    areas = np.trapezoid(ds.features.astype(np.float64), axis=1)
    np.testing.assert_allclose(areas, 1.0, rtol=1e-5)
    assert (ds.labels >= 0).all() and (ds.labels <= 1).all()
    assert (ds.domains == 0).all()
    assert len(ds.provenance) == 64


def test_generation_independent_of_thread_count():
    a = fast_dataset(12, seed=9, threads=1)
    b = fast_dataset(12, seed=9, threads=4)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)
    assert a.provenance == b.provenance


def test_generation_seed_changes_rows():
    a = fast_dataset(4, seed=0)
    b = fast_dataset(4, seed=1)
    assert not np.array_equal(a.features, b.features)


def test_stratified_split_fractions_and_coverage(small_dataset):
    train, val = stratified_split(small_dataset, 0.75, bins=4, seed=0)
    assert len(train) + len(val) == len(small_dataset)
    assert abs(len(train) - 0.75 * len(small_dataset)) <= 4  # one row per bin
    # per-bin proportions approximately preserved
    edges = np.linspace(0.0, 1.0, 5)
    for lo, hi in zip(edges[:-1], edges[1:]):
        n_all = ((small_dataset.labels >= lo) & (small_dataset.labels <= hi)).sum()
        n_tr = ((train.labels >= lo) & (train.labels <= hi)).sum()
        if n_all >= 4:
            assert abs(n_tr / n_all - 0.75) < 0.3
    # deterministic
    train2, _ = stratified_split(small_dataset, 0.75, bins=4, seed=0)
    assert np.array_equal(train.features, train2.features)


def test_split_rows_partition_the_dataset(small_dataset):
    train, val = stratified_split(small_dataset, 0.8, seed=3)
    combined = np.vstack([train.features, val.features])
    original = np.sort(small_dataset.features.view("S64").ravel())
    assert np.array_equal(np.sort(combined.view("S64").ravel()), original)


def test_random_split_works_on_hidden_labels(small_dataset):
    real = make_pseudo_real(small_dataset, DistortionSpec(seed=2))
    tr, va = random_split(real, 0.8, seed=1)
    assert len(tr) + len(va) == len(real)
    assert tr.labels is None and tr.hidden_labels is not None


def test_augment_noise_determinism_and_normalization(small_dataset):
    a = augment_noise(small_dataset, 30.0, seed=0, epoch=1)
    b = augment_noise(small_dataset, 30.0, seed=0, epoch=1)
    c = augment_noise(small_dataset, 30.0, seed=0, epoch=2)
    assert np.array_equal(a.features, b.features)
    assert not np.array_equal(a.features, c.features)
    areas = np.trapezoid(a.features.astype(np.float64), axis=1)
    np.testing.assert_allclose(areas, 1.0, rtol=1e-5)
    assert np.array_equal(a.labels, small_dataset.labels)
    # disabled noise is the identity
    d = augment_noise(small_dataset, None, seed=0, epoch=1)
    assert np.array_equal(d.features, small_dataset.features)


def test_pseudo_real_hides_labels(small_dataset):
    real = make_pseudo_real(small_dataset, DistortionSpec(seed=5))
    assert real.labels is None
    assert np.array_equal(real.hidden_labels, small_dataset.labels)
    assert (real.domains == 1).all()
    assert not np.array_equal(real.features, small_dataset.features)
    again = make_pseudo_real(small_dataset, DistortionSpec(seed=5))
    assert np.array_equal(real.features, again.features)


def test_balanced_batches_composition(small_dataset):
    real = make_pseudo_real(small_dataset, DistortionSpec(seed=1))
    batches = list(balanced_batches(small_dataset, real, batch_size=16,
                                    seed=0, epoch=1))
    assert len(batches) == 64 // 8
    for sim_x, sim_y, real_x in batches:
        assert sim_x.shape == (8, 16) and sim_y.shape == (8,)
        assert real_x.shape == (8, 16)


def test_balanced_batches_share_plain_batch_order(small_dataset):
    # the simulated half follows the same named stream as plain training
    real = make_pseudo_real(small_dataset, DistortionSpec(seed=1))
    order = substream(0, "batch-order", 3).permutation(len(small_dataset))
    batches = list(balanced_batches(small_dataset, real, batch_size=16,
                                    seed=0, epoch=3))
    for b, (sim_x, _, _) in enumerate(batches):
        idx = order[b * 8:(b + 1) * 8]
        assert np.array_equal(sim_x, small_dataset.features[idx])


def test_save_load_round_trip(small_dataset, tmp_path):
    path = tmp_path / "ds.bin"
    save_dataset(small_dataset, path)
    assert path.stat().st_size == HEADER_BYTES + 64 * (16 + 2) * 4 + TRAILER_BYTES
    back = load_dataset(path)
    assert np.array_equal(back.features, small_dataset.features)
    assert np.array_equal(back.labels, small_dataset.labels)
    assert np.array_equal(back.domains, small_dataset.domains)
    assert back.provenance == small_dataset.provenance
    # second save is byte-identical
    path2 = tmp_path / "ds2.bin"
    save_dataset(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_hidden_labels_survive_round_trip(small_dataset, tmp_path):
    real = make_pseudo_real(small_dataset, DistortionSpec(seed=4))
    path = tmp_path / "real.bin"
    save_dataset(real, path)
    back = load_dataset(path)
    assert back.labels is None
    assert np.array_equal(back.hidden_labels, real.hidden_labels)
    assert (back.domains == 1).all()


def test_corrupted_file_detected(small_dataset, tmp_path):
    path = tmp_path / "ds.bin"
    save_dataset(small_dataset, path)
    blob = bytearray(path.read_bytes())
    blob[HEADER_BYTES + 9] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(DataFormatError, match="checksum"):
        load_dataset(path)


def test_wrong_magic_detected(small_dataset, tmp_path):
    path = tmp_path / "ds.bin"
    save_dataset(small_dataset, path)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"NOPE"
    path.write_bytes(bytes(blob))
    with pytest.raises(DataFormatError, match="magic"):
        load_dataset(path)


def test_truncated_file_detected(small_dataset, tmp_path):
    path = tmp_path / "ds.bin"
    save_dataset(small_dataset, path)
    path.write_bytes(path.read_bytes()[:40])
    with pytest.raises(DataFormatError):
        load_dataset(path)


def test_export_csv_header(small_dataset, tmp_path):
    path = tmp_path / "ds.csv"
    export_csv(small_dataset, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("band_00,band_01")
    assert lines[0].endswith("oxygenation,domain")
    assert len(lines) == 65


def test_dataset_validation():
    feats = np.full((4, 16), 0.1, np.float32)
    labels = np.full(4, 0.5, np.float32)
    with pytest.raises(DataError):
        Dataset(features=feats, labels=labels, domains=np.full(4, 2))
    with pytest.raises(ShapeError):
        Dataset(features=feats, labels=labels[:3], domains=np.zeros(4))
    with pytest.raises(DataError):
        Dataset(features=feats, labels=labels, domains=np.zeros(4),
                hidden_labels=labels)
    with pytest.raises(DataError):
        Dataset(features=feats, labels=labels * np.nan, domains=np.zeros(4))
