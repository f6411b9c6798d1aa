import gzip

import numpy as np
import pytest

from fakedata import write_fake_cifar, write_idx_images, write_idx_labels
from lowbit import dataio


def test_idx_scaling_and_order(tmp_path):
    imgs = np.zeros((3, 2, 2), dtype=np.uint8)
    imgs[0, 0, 0] = 255
    imgs[2, 1, 1] = 51
    write_idx_images(tmp_path / "i", imgs)
    write_idx_labels(tmp_path / "l", [7, 0, 3])
    ds = dataio.load_mnist(tmp_path / "i", tmp_path / "l")
    assert ds.features.shape == (3, 4)
    assert ds.features[0, 0] == 1.0 and ds.features[1].sum() == 0.0
    assert ds.features[2, 3] == pytest.approx(0.2)
    assert ds.labels.tolist() == [7, 0, 3]
    assert ds.image_shape == (1, 2, 2)


def test_idx_gzip(tmp_path):
    imgs = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
    write_idx_images(tmp_path / "i", imgs)
    write_idx_labels(tmp_path / "l", [1, 2])
    for name in ("i", "l"):
        (tmp_path / f"{name}.gz").write_bytes(gzip.compress((tmp_path / name).read_bytes()))
    ds = dataio.load_mnist(tmp_path / "i.gz", tmp_path / "l.gz")
    assert np.array_equal(ds.features * 255, imgs.reshape(2, 4))


def test_idx_errors(tmp_path):
    imgs = np.zeros((3, 2, 2), dtype=np.uint8)
    write_idx_images(tmp_path / "i", imgs)
    write_idx_labels(tmp_path / "short", [1, 2])
    with pytest.raises(dataio.CountMismatchError):
        dataio.load_mnist(tmp_path / "i", tmp_path / "short")
    write_idx_images(tmp_path / "bad", imgs, magic=2049)
    write_idx_labels(tmp_path / "l", [1, 2, 3])
    with pytest.raises(dataio.IdxMagicError):
        dataio.load_mnist(tmp_path / "bad", tmp_path / "l")
    with pytest.raises(dataio.IdxMagicError):
        dataio.load_mnist(tmp_path / "i", tmp_path / "i")
    (tmp_path / "trunc").write_bytes((tmp_path / "i").read_bytes()[:-1])
    with pytest.raises(dataio.DataFormatError):
        dataio.read_idx_images(tmp_path / "trunc")
    assert not issubclass(dataio.CountMismatchError, dataio.IdxMagicError)


def test_real_mnist_shapes(mnist_dir):
    ds = dataio.load_mnist_split("train", mnist_dir)
    assert ds.features.shape == (60000, 784)
    assert ds.features.min() == 0.0 and ds.features.max() == 1.0
    te = dataio.load_mnist_split("test", mnist_dir)
    assert te.n == 10000


def test_cifar_records(tmp_path):
    rec = np.zeros(dataio.CIFAR_RECORD, dtype=np.uint8)
    rec[0] = 6
    rec[1] = 255
    (tmp_path / "one.bin").write_bytes(rec.tobytes())
    ds = dataio.load_cifar10(tmp_path / "one.bin")
    assert ds.n == 1 and ds.d == 3072 and ds.labels.tolist() == [6]
    assert ds.features[0, 0] == 1.0 and ds.image_shape == (3, 32, 32)
    (tmp_path / "trunc.bin").write_bytes(rec.tobytes()[:-5])
    with pytest.raises(dataio.CifarFormatError):
        dataio.load_cifar10(tmp_path / "trunc.bin")


def test_cifar_batches(tmp_path):
    root = write_fake_cifar(tmp_path / "c", per_batch=20)
    ds = dataio.load_cifar10_split("train", root)
    assert ds.features.shape == (100, 3072)
    assert 0.0 <= ds.features.min() and ds.features.max() <= 1.0
    assert dataio.load_cifar10_split("test", root).n == 20


def test_missing_files_hint(tmp_path):
    with pytest.raises(FileNotFoundError, match=dataio.DATA_DIR_ENV):
        dataio.load_mnist_split("train", tmp_path)


def test_data_root_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv(dataio.DATA_DIR_ENV, str(tmp_path))
    assert dataio.data_root() == tmp_path
    monkeypatch.delenv(dataio.DATA_DIR_ENV)
    with pytest.raises(FileNotFoundError):
        dataio.data_root()


def _toy_dataset(labels):
    labels = np.asarray(labels)
    feats = np.arange(labels.size, dtype=float)[:, None] / labels.size
    return dataio.Dataset(feats, labels)


def test_make_binary_task():
    ds = _toy_dataset([0, 3, 7, 1, 5, 2, 9, 4])
    task = dataio.make_binary_task(ds, {0, 1, 2}, {3, 4, 5})
    assert task.n == 6
    assert task.y.tolist() == [1, -1, 1, -1, 1, -1]
    # relative order preserved
    assert np.all(np.diff(task.features[:, 0]) > 0)
    with pytest.raises(dataio.TaskConstructionError):
        dataio.make_binary_task(ds, {0}, {0})
    with pytest.raises(dataio.TaskConstructionError):
        dataio.make_binary_task(ds, {0}, {8})


def test_mnist_tasks(mnist_dir):
    ds = dataio.load_mnist_split("train", mnist_dir)
    t = dataio.make_binary_task(ds, range(3), range(3, 6))
    assert t.n == int(np.isin(ds.labels, range(6)).sum())
    t2 = dataio.make_binary_task(ds, range(5), range(5, 10))
    assert t2.n == 60000


def test_subsample():
    ds = _toy_dataset([0] * 50 + [1] * 50)
    task = dataio.make_binary_task(ds, {0}, {1})
    assert dataio.subsample(task, 1.0) is task
    half = dataio.subsample(task, 0.5, seed=3)
    assert half.n == 50
    assert abs((half.y == 1).sum() - 25) <= 1
    again = dataio.subsample(task, 0.5, seed=3)
    assert np.array_equal(half.features, again.features)
    with pytest.raises(ValueError):
        dataio.subsample(task, 0.0)
