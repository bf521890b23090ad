import numpy as np
import pytest
import torch
from PIL import Image

from jointtok.data import DatasetError, DatasetSpec, ImageDataset, ingest_dataset, load_image_directory, synthetic_images


def test_synthetic_deterministic_and_normalised():
    a, la = synthetic_images(64, seed=3)
    b, lb = synthetic_images(64, seed=3)
    assert np.array_equal(a, b) and np.array_equal(la, lb)
    assert a.shape == (64, 32, 32, 3) and a.min() >= -1 and a.max() <= 1
    assert set(la.tolist()) == set(range(8))
    assert not np.array_equal(a, synthetic_images(64, seed=4)[0])


def test_split_deterministic():
    t1, v1 = ingest_dataset(DatasetSpec(train_size=100, val_size=20))
    t2, v2 = ingest_dataset(DatasetSpec(train_size=100, val_size=20))
    assert t1.fingerprint() == t2.fingerprint() and v1.fingerprint() == v2.fingerprint()
    assert len(t1) == 100 and len(v1) == 20
    first = next(t1.batches(8, seed=0))
    assert torch.equal(first.pixels, next(t2.batches(8, seed=0)).pixels)


def test_batches_in_range():
    train, _ = ingest_dataset(DatasetSpec(train_size=40, val_size=8))
    for batch in train.batches(16, drop_last=False):
        assert batch.pixels.min() >= -1 and batch.pixels.max() <= 1


def write_images(root, count, size=8, classes=None):
    rng = np.random.default_rng(0)
    for i in range(count):
        folder = root / (classes[i % len(classes)] if classes else "")
        folder.mkdir(parents=True, exist_ok=True)
        Image.fromarray(rng.integers(0, 256, (size, size, 3), dtype=np.uint8)).save(folder / f"{i}.png")


def test_ten_images_batch_four(tmp_path):
    write_images(tmp_path, 10)
    pixels, labels, names = load_image_directory(tmp_path, 8)
    data = ImageDataset(pixels, labels)
    assert len(list(data.batches(4))) == 2
    sizes = [len(b) for b in data.batches(4, drop_last=False)]
    assert sizes == [4, 4, 2]
    assert pixels.min() >= -1 and pixels.max() <= 1 and names == ["0"]


def test_class_directories(tmp_path):
    write_images(tmp_path, 6, classes=["cat", "dog"])
    _, labels, names = load_image_directory(tmp_path, 8)
    assert names == ["cat", "dog"] and sorted(labels.tolist()) == [0, 0, 0, 1, 1, 1]


def test_directory_errors(tmp_path):
    with pytest.raises(DatasetError):
        load_image_directory(tmp_path / "missing", 8)
    with pytest.raises(DatasetError):
        load_image_directory(tmp_path, 8)
    write_images(tmp_path, 2, size=16)
    with pytest.raises(DatasetError, match="expected 8x8"):
        load_image_directory(tmp_path, 8)
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(DatasetError):
        load_image_directory(tmp_path, 16)


def test_out_of_range_pixels_rejected():
    with pytest.raises(DatasetError):
        ImageDataset(np.full((1, 4, 4, 3), 1.5, dtype=np.float32), np.zeros(1))


def test_batch_at_step_is_pure():
    train, _ = ingest_dataset(DatasetSpec(train_size=64, val_size=8))
    a = train.batch_at_step(11, 8, seed=2)
    b = train.batch_at_step(11, 8, seed=2)
    assert torch.equal(a.pixels, b.pixels) and torch.equal(a.labels, b.labels)
    assert not torch.equal(a.pixels, train.batch_at_step(11, 8, seed=3).pixels)
