import gzip
import struct

import numpy as np
import pytest

from qbp.data import (
    DataError,
    Dataset,
    IdxError,
    SplitSpec,
    dump_idx_images,
    dump_idx_labels,
    eval_batches,
    fixture_dir,
    load_idx_images,
    load_idx_labels,
    load_mnist,
    minibatches,
    split,
)


def images_bytes(n=3, rows=2, cols=2, fill=None):
    payload = bytes(range(n * rows * cols)) if fill is None else bytes([fill]) * (n * rows * cols)
    return struct.pack(">IIII", 0x803, n, rows, cols) + payload


def tiny(n, features=1):
    imgs = np.arange(n * features, dtype=np.float32).reshape(n, features)
    return Dataset(imgs, (np.arange(n) % 10).astype(np.uint8))


def test_parse_images():
    x = load_idx_images(images_bytes())
    assert x.shape == (3, 4) and x.dtype == np.float32
    assert x[0, 1] == np.float32(1 / 255)


def test_pixel_255_is_one():
    assert (load_idx_images(images_bytes(fill=255)) == 1.0).all()


def test_bad_magic():
    data = struct.pack(">IIII", 0x802, 1, 1, 1) + b"\0"
    with pytest.raises(IdxError, match="unexpected magic") as info:
        load_idx_images(data)
    assert info.value.offset == 0


@pytest.mark.parametrize(
    "data, what",
    [
        (b"\0\0", "truncated header"),
        (struct.pack(">II", 0x803, 1), "truncated dimension"),
        (images_bytes()[:-1], "truncated payload"),
        (images_bytes() + b"\0", "trailing"),
    ],
)
def test_parse_errors_name_offset(data, what):
    with pytest.raises(IdxError, match=what) as info:
        load_idx_images(data)
    assert "byte offset" in str(info.value)


def test_labels_parse_and_range():
    assert load_idx_labels(struct.pack(">II", 0x801, 3) + bytes([0, 9, 4])).tolist() == [0, 9, 4]
    with pytest.raises(IdxError, match="out of range") as info:
        load_idx_labels(struct.pack(">II", 0x801, 3) + bytes([0, 9, 10]))
    assert info.value.offset == 10


def test_roundtrip(rng):
    raw = rng.integers(0, 256, (5, 784)).astype(np.float32) / 255
    assert np.array_equal(load_idx_images(dump_idx_images(raw)), raw)
    labels = rng.integers(0, 10, 5)
    assert load_idx_labels(dump_idx_labels(labels)).tolist() == labels.tolist()


def test_dataset_length_mismatch():
    with pytest.raises(ValueError):
        Dataset(np.zeros((3, 2), np.float32), np.zeros(2, np.uint8))


def test_split_deterministic_and_disjoint():
    ds = tiny(1000)
    spec = SplitSpec(600, 300, shuffle_seed=5)
    (a, b), (c, d) = split(ds, spec), split(ds, spec)
    assert np.array_equal(a.images, c.images) and np.array_equal(b.images, d.images)
    assert len(a) == 600 and len(b) == 300
    ids_a, ids_b = set(a.images[:, 0].tolist()), set(b.images[:, 0].tolist())
    assert not ids_a & ids_b and len(ids_a) == 600
    other, _ = split(ds, SplitSpec(600, 300, shuffle_seed=6))
    assert not np.array_equal(a.images, other.images)


def test_split_needs_enough_examples():
    with pytest.raises(DataError):
        split(tiny(100), SplitSpec(60, 50))


def test_batches_per_epoch():
    batches = list(minibatches(tiny(40000), 200, seed=0, epoch=0))
    assert len(batches) == 200
    x, y = batches[0]
    assert x.shape == (1, 200) and y.shape == (200,)


def test_short_final_batch_dropped():
    batches = list(minibatches(tiny(40100), 200, seed=0, epoch=0))
    assert len(batches) == 200
    seen = np.concatenate([x[0] for x, _ in batches])
    assert len(set(seen.tolist())) == 40000


def test_epochs_reorder_same_multiset():
    ds = tiny(1000)
    e0 = np.concatenate([x[0] for x, _ in minibatches(ds, 100, seed=1, epoch=0)])
    e1 = np.concatenate([x[0] for x, _ in minibatches(ds, 100, seed=1, epoch=1)])
    again = np.concatenate([x[0] for x, _ in minibatches(ds, 100, seed=1, epoch=0)])
    assert not np.array_equal(e0, e1) and np.array_equal(e0, again)
    assert np.array_equal(np.sort(e0), np.sort(e1))


def test_batch_labels_follow_images():
    ds = tiny(500)
    for x, y in minibatches(ds, 50, seed=3, epoch=2):
        assert np.array_equal(y, (x[0].astype(int) % 10).astype(np.uint8))


def test_eval_batches_cover_everything():
    ds = tiny(2500)
    sizes = [x.shape[1] for x, _ in eval_batches(ds, 1000)]
    assert sizes == [1000, 1000, 500]


def test_load_directory_raw_and_gzip(tmp_path, rng):
    imgs = rng.integers(0, 256, (4, 784)).astype(np.float32) / 255
    labels = np.array([1, 2, 3, 4])
    (tmp_path / "train-images-idx3-ubyte").write_bytes(dump_idx_images(imgs))
    (tmp_path / "train-labels-idx1-ubyte.gz").write_bytes(gzip.compress(dump_idx_labels(labels)))
    (tmp_path / "t10k-images-idx3-ubyte.gz").write_bytes(gzip.compress(dump_idx_images(imgs[:2])))
    (tmp_path / "t10k-labels-idx1-ubyte").write_bytes(dump_idx_labels(labels[:3]))
    with pytest.raises(DataError, match="2 images but 3 labels"):
        load_mnist(tmp_path)
    (tmp_path / "t10k-labels-idx1-ubyte").write_bytes(dump_idx_labels(labels[:2]))
    train, test = load_mnist(tmp_path)
    assert np.array_equal(train.images, imgs) and test.labels.tolist() == [1, 2]


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_mnist(tmp_path)


def test_bundled_fixture():
    train, test = load_mnist(fixture_dir())
    assert train.images.shape == (1000, 784) and test.images.shape == (500, 784)
    assert set(np.unique(train.labels)) == set(range(10))


def test_real_mnist_shapes(mnist):
    train, test = mnist
    assert train.images.shape == (60000, 784) and test.images.shape == (10000, 784)
    assert train.images.max() == 1.0 and train.images.min() == 0.0
    assert np.bincount(test.labels).tolist() == [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]
