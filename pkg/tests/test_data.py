import gzip

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repudiate.data import (DataFormatError, Dataset, MiniBatchSpec, apply_flip, dist_to_subspace, load_dataset,
                            load_idx, make_schedule, make_split_plan, sample_iid_batches, save_dataset,
                            synth_gaussian, synth_subspace, write_idx)


def _idx_pair(tmp_path, n=6, rows=4, cols=3):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(n, rows, cols), dtype=np.uint8)
    labels = np.arange(n) % 10
    write_idx(imgs, labels, tmp_path / "img", tmp_path / "lbl")
    return imgs, labels


def test_idx_round_trip(tmp_path):
    imgs, labels = _idx_pair(tmp_path)
    ds = load_idx(tmp_path / "img", tmp_path / "lbl")
    assert ds.image_shape == (4, 3, 1)
    np.testing.assert_allclose(ds.features, imgs.reshape(6, -1) / 255.0)
    assert ds.labels.tolist() == labels.tolist()


def test_idx_gzip_is_detected(tmp_path):
    _idx_pair(tmp_path)
    for name in ("img", "lbl"):
        (tmp_path / f"{name}.gz").write_bytes(gzip.compress((tmp_path / name).read_bytes()))
    a = load_idx(tmp_path / "img", tmp_path / "lbl")
    b = load_idx(tmp_path / "img.gz", tmp_path / "lbl.gz")
    assert np.array_equal(a.features, b.features)


def test_idx_errors(tmp_path):
    _idx_pair(tmp_path)
    raw = (tmp_path / "img").read_bytes()
    (tmp_path / "short").write_bytes(raw[:-1])
    with pytest.raises(DataFormatError, match="truncat"):
        load_idx(tmp_path / "short", tmp_path / "lbl")
    (tmp_path / "bad").write_bytes(b"\x00\x00\x09\x99" + raw[4:])
    with pytest.raises(DataFormatError):
        load_idx(tmp_path / "bad", tmp_path / "lbl")
    write_idx(np.zeros((5, 4, 3), np.uint8), np.zeros(5), tmp_path / "i5", tmp_path / "l5")
    with pytest.raises(DataFormatError, match="mismatch"):
        load_idx(tmp_path / "i5", tmp_path / "lbl")


def test_bundled_mnist_subset_loads():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "data" / "mnist5k"
    ds = load_idx(root / "images-idx3-ubyte.gz", root / "labels-idx1-ubyte.gz")
    assert ds.n == 5000 and ds.dim == 784
    assert np.bincount(ds.labels).tolist() == [500] * 10
    assert 0.0 <= ds.features.min() and ds.features.max() <= 1.0


def test_dataset_is_read_only_and_validates():
    ds = Dataset(np.zeros((3, 2)), [0, 1, 1], 2)
    with pytest.raises(ValueError):
        ds.features[0, 0] = 1.0
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2)), [0, 1, 2], 2)
    with pytest.raises(ValueError):
        Dataset(np.full((1, 1), np.inf), [0], 2)


def test_container_round_trip(tmp_path, images):
    save_dataset(images, tmp_path / "d.bin")
    back = load_dataset(tmp_path / "d.bin")
    assert np.array_equal(back.features, images.features)
    assert back.image_shape == images.image_shape
    raw = (tmp_path / "d.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-3])
    with pytest.raises(DataFormatError):
        load_dataset(tmp_path / "t.bin")


def test_batch_spec_validation():
    assert MiniBatchSpec((3, 1)).flips == (0, 0)
    with pytest.raises(ValueError):
        MiniBatchSpec((1, 1))
    with pytest.raises(ValueError):
        MiniBatchSpec((1, 2), (0,))
    with pytest.raises(ValueError):
        MiniBatchSpec((1,), (2,))
    with pytest.raises(IndexError):
        MiniBatchSpec((5,)).validate(5)
    b = MiniBatchSpec((4, 0, 2), (1, 0, 1))
    assert MiniBatchSpec.from_json(b.to_json()) == b


def test_flip_reverses_width_and_is_an_involution(images):
    x = images.features[:3].reshape(3, 8, 7, 1)
    flipped = apply_flip(x, [1, 0, 1])
    assert np.array_equal(flipped[0], x[0][:, ::-1])
    assert np.array_equal(flipped[1], x[1])
    assert np.array_equal(apply_flip(flipped, [1, 0, 1]), x)
    with pytest.raises(ValueError):
        apply_flip(np.zeros((2, 5)), [1, 0])


def test_gather_sorts_indices_and_applies_flags(images):
    x, y = images.gather(MiniBatchSpec((5, 2), (1, 0)))
    assert y.tolist() == [images.labels[2], images.labels[5]]
    assert np.array_equal(x[1].reshape(8, 7), images.features[5].reshape(8, 7)[:, ::-1])


@given(n=st.integers(4, 60), b=st.integers(1, 4), epochs=st.integers(1, 3), seed=st.integers(0, 99))
@settings(max_examples=40, deadline=None)
def test_schedule_visits_each_sample_once_per_epoch(n, b, epochs, seed):
    sched = make_schedule(n, b, epochs, seed)
    per = n // b
    assert len(sched) == per * epochs
    for e in range(epochs):
        seen = [i for bt in sched.batches[e * per:(e + 1) * per] for i in bt.indices]
        assert len(seen) == len(set(seen)) == per * b


def test_schedule_is_seeded():
    a, b = make_schedule(20, 5, 2, 3), make_schedule(20, 5, 2, 3)
    assert a.batches == b.batches
    assert a.batches != make_schedule(20, 5, 2, 4).batches


def test_iid_batches_are_distinct_within_a_batch():
    for bt in sample_iid_batches(30, 7, 50, 0):
        assert len(set(bt.indices)) == 7 and max(bt.indices) < 30


@given(lam=st.sampled_from([1, 2, 5]), kappa=st.sampled_from([1, 2, 3]), seed=st.integers(0, 50))
@settings(max_examples=30, deadline=None)
def test_split_plan_is_an_equipartition_of_groups(lam, kappa, seed):
    n = 60
    plan = make_split_plan(n, lam, kappa, 4, seed)
    assert sorted(plan.groups.ravel().tolist()) == list(range(n))
    for t in range(1, 5):
        sizes = [plan.split_members(t, k).size for k in range(kappa)]
        assert sizes == [n // kappa] * kappa
        assert np.array_equal(np.sort(np.concatenate([plan.split_members(t, k) for k in range(kappa)])),
                              np.arange(n))


def test_split_plan_rejects_indivisible():
    with pytest.raises(ValueError):
        make_split_plan(10, 3, 2, 1, 0)


def test_lambda_one_groups_are_identity():
    plan = make_split_plan(12, 1, 3, 2, 0)
    assert plan.groups.ravel().tolist() == list(range(12))


def test_synth_gaussian_balanced_and_separated():
    ds = synth_gaussian(300, 5, 3, seed=0, class_separation=6.0)
    assert np.bincount(ds.labels).tolist() == [100, 100, 100]
    means = np.array([ds.features[ds.labels == c].mean(0) for c in range(3)])
    assert np.linalg.norm(means[0] - means[1]) == pytest.approx(6.0, abs=0.6)


def test_synth_subspace_premises():
    ds, outlier, basis = synth_subspace(10, 4, 0)
    assert outlier == 0
    assert dist_to_subspace(ds.features[0], basis) > 0.4
    for i in range(1, 10):
        assert dist_to_subspace(ds.features[i], basis) == pytest.approx(0.0, abs=1e-12)


def test_dist_to_subspace_plug_in_and_degenerate():
    assert dist_to_subspace([0.0, 1.0], [[1.0, 0.0]]) == pytest.approx(1.0)
    assert dist_to_subspace([3.0, -2.5], [[2.0, 0.0]]) == pytest.approx(2.5)
    with pytest.raises(ValueError):
        dist_to_subspace([1.0, 0.0], [[1.0, 0.0], [2.0, 0.0]])
