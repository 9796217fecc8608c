import numpy as np
import pytest
import torch

import dataio
from config import Config
from dataio import (
    augment, batches, generate_shapes, load_dataset, n_train_batches, to_batch, train_batch_at,
)
from exceptions import ConfigurationError, IngestionError

RECORDS = 4


def write_cifar(root, records=RECORDS, skip=None, truncate=None):
    folder = root / Config.CIFAR10_DIRNAME
    folder.mkdir(parents=True)
    for f, name in enumerate(Config.CIFAR10_TRAIN_FILES + Config.CIFAR10_EVAL_FILES):
        if name == skip:
            continue
        data = np.zeros((records, dataio.CIFAR_RECORD_BYTES), dtype=np.uint8)
        for i in range(records):
            data[i, 0] = (f + i) % 10
            data[i, 1:1025] = 10
            data[i, 1025:2049] = 20
            data[i, 2049:] = 30
            data[i, 2] = 99 + i
        raw = data.tobytes()
        if name == truncate:
            raw = raw[:-1]
        (folder / name).write_bytes(raw)
    return folder


@pytest.fixture
def small_cifar(monkeypatch):
    monkeypatch.setattr(dataio, "CIFAR_RECORDS_PER_FILE", RECORDS)


def test_cifar_parsing(tmp_path, small_cifar):
    write_cifar(tmp_path)
    handle = load_dataset("cifar10", tmp_path)
    assert handle.split_sizes == {"train": 5 * RECORDS, "eval": RECORDS}
    assert handle.n_classes == 10
    assert handle.image_shape == (3, 32, 32)
    assert handle.train_labels[:RECORDS].tolist() == [0, 1, 2, 3]
    assert handle.eval_labels.tolist() == [5, 6, 7, 8]
    image = handle.train_images[1]
    assert image[0, 0, 0] == 10 and image[1, 5, 5] == 20 and image[2, 31, 31] == 30
    assert image[0, 0, 1] == 100


def test_cifar_limits(tmp_path, small_cifar):
    write_cifar(tmp_path)
    handle = load_dataset("cifar10", tmp_path, train_limit=6, eval_limit=2)
    assert handle.split_sizes == {"train": 6, "eval": 2}


def test_missing_cifar_file(tmp_path, small_cifar):
    write_cifar(tmp_path, skip="data_batch_3.bin")
    with pytest.raises(IngestionError) as excinfo:
        load_dataset("cifar10", tmp_path)
    assert excinfo.value.path.name == "data_batch_3.bin"


def test_truncated_cifar_file(tmp_path, small_cifar):
    write_cifar(tmp_path, truncate="test_batch.bin")
    with pytest.raises(IngestionError):
        load_dataset("cifar10", tmp_path)


def test_data_root_from_environment(tmp_path, monkeypatch, small_cifar):
    write_cifar(tmp_path)
    monkeypatch.setenv(Config.DATA_ROOT_ENV, str(tmp_path))
    assert load_dataset("cifar10").split_sizes["eval"] == RECORDS


def test_unknown_dataset():
    with pytest.raises(ConfigurationError):
        load_dataset("imagenet")


def test_synthetic_is_deterministic():
    a = load_dataset("synthetic_shapes", n=64, seed=3)
    b = load_dataset("synthetic_shapes", n=64, seed=3)
    assert torch.equal(a.train_images, b.train_images) and torch.equal(a.eval_labels, b.eval_labels)
    assert not torch.equal(a.train_images, load_dataset("synthetic_shapes", n=64, seed=4).train_images)


def test_synthetic_split_sizes(shapes_dataset):
    assert shapes_dataset.split_sizes == {"train": 96, "eval": 32}
    assert shapes_dataset.n_classes == 2
    assert shapes_dataset.class_names == ["square", "circle"]
    assert load_dataset("synthetic_shapes", n=512).split_sizes == {"train": 384, "eval": 128}


def test_synthetic_labels_are_balanced():
    _, labels = generate_shapes(100, seed=0)
    assert labels.sum() == 50


def test_to_batch_scales_to_unit_range():
    batch = to_batch(torch.tensor([[[[0, 255]]]], dtype=torch.uint8), torch.tensor([1]))
    assert batch.pixels.dtype == torch.float32
    assert batch.pixels.flatten().tolist() == [0.0, 1.0]


def test_augment_is_seeded(make_batch):
    batch = make_batch(n=8, size=16)
    a, b = augment(batch, seed=1), augment(batch, seed=1)
    assert torch.equal(a.pixels, b.pixels)
    assert not torch.equal(a.pixels, augment(batch, seed=2).pixels)
    assert torch.equal(a.labels, batch.labels)
    assert a.pixels.shape == batch.pixels.shape
    assert a.pixels.min() >= 0 and a.pixels.max() <= 1


def test_double_flip_without_crop_is_identity(make_batch):
    batch = make_batch(n=4, size=8)
    once = augment(batch, seed=0, pad=0, force_flip=True)
    assert torch.equal(once.pixels, batch.pixels.flip(-1))
    assert torch.equal(augment(once, seed=0, pad=0, force_flip=True).pixels, batch.pixels)


def test_eval_batches_keep_order_and_tail(make_handle):
    handle = make_handle(n_eval=10)
    stream = list(batches(handle, "eval", 4))
    assert [len(b) for b in stream] == [4, 4, 2]
    assert torch.equal(torch.cat([b.labels for b in stream]), handle.eval_labels)


def test_train_batches_drop_tail_and_cover_without_repeats(make_handle):
    handle = make_handle(n_train=10, n_classes=10)
    stream = list(batches(handle, "train", 3, seed=1))
    assert n_train_batches(handle, 3) == 3
    assert [len(b) for b in stream] == [3, 3, 3]
    labels = torch.cat([b.labels for b in stream]).tolist()
    assert len(set(labels)) == 9


def test_ordered_train_stream_keeps_tail(make_handle):
    handle = make_handle(n_train=10, n_classes=10)
    stream = list(batches(handle, "train", 4, seed=1, shuffle=False))
    assert [len(b) for b in stream] == [4, 4, 2]
    assert torch.equal(torch.cat([b.labels for b in stream]), handle.train_labels)
    assert [len(b) for b in batches(handle, "train", 64, shuffle=False)] == [10]


def test_train_order_depends_on_epoch(make_handle):
    handle = make_handle(n_train=16, n_classes=16)
    first = torch.cat([b.labels for b in batches(handle, "train", 4, seed=0, epoch=0)])
    second = torch.cat([b.labels for b in batches(handle, "train", 4, seed=0, epoch=1)])
    assert not torch.equal(first, second)


def test_train_batch_at_follows_epoch_streams(make_handle):
    handle = make_handle(n_train=12, n_classes=12)
    stream = list(batches(handle, "train", 4, seed=3, epoch=0)) + list(batches(handle, "train", 4, seed=3, epoch=1))
    for step, expected in enumerate(stream):
        batch = train_batch_at(handle, 4, seed=3, step=step)
        assert torch.equal(batch.labels, expected.labels)
        assert torch.equal(batch.pixels, expected.pixels)


def test_train_batch_at_rejects_oversized_batch(make_handle):
    with pytest.raises(ConfigurationError):
        train_batch_at(make_handle(n_train=2), 4, seed=0, step=0)


def test_unknown_split(make_handle):
    with pytest.raises(ConfigurationError):
        list(batches(make_handle(), "test", 4))
