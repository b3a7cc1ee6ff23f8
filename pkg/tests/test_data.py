import struct
from pathlib import Path

import numpy as np
import pytest

from poisonpool.data import (
    DatasetSpec,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
    LabeledImage,
    SubDataset,
    class_pattern,
    generate_synthetic,
    load_idx,
    pixel_hash,
    round_half_up,
    split,
    write_idx,
)
from poisonpool.nn import ModelSpec, TrainRegimen, init_model, predict, train
from poisonpool.seeding import rng_from


def test_spec_validation_rejects_bad_geometry():
    with pytest.raises(ValueError, match="classes"):
        DatasetSpec(classes=1)
    with pytest.raises(ValueError, match="height and width"):
        DatasetSpec(height=7)
    with pytest.raises(ValueError, match="noise"):
        DatasetSpec(noise=-0.1)
    with pytest.raises(ValueError, match="kind"):
        DatasetSpec(kind="cifar")


def test_noise_free_generation_is_identical_per_class():
    spec = DatasetSpec(noise=0.0, samples_per_class=3, classes=4)
    sub = generate_synthetic(spec)
    class3 = [img.pixels for img in sub.images if img.label == 3]
    assert len(class3) == 3
    assert np.array_equal(class3[0], class3[1])
    assert np.array_equal(class3[1], class3[2])


def test_label_histogram_is_exactly_samples_per_class():
    spec = DatasetSpec(classes=10, samples_per_class=100, noise=0.05)
    sub = generate_synthetic(spec)
    assert len(sub) == 1000
    counts = np.bincount(sub.labels_array(), minlength=10)
    assert counts.tolist() == [100] * 10


def test_generation_is_pure_function_of_spec():
    spec = DatasetSpec(samples_per_class=5, seed=99)
    a = generate_synthetic(spec)
    b = generate_synthetic(spec)
    assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a.images, b.images))
    c = generate_synthetic(DatasetSpec(samples_per_class=5, seed=100))
    assert any(not np.array_equal(x.pixels, y.pixels) for x, y in zip(a.images, c.images))


def test_pixels_stay_in_unit_interval():
    sub = generate_synthetic(DatasetSpec(samples_per_class=20, noise=0.5))
    pixels = sub.pixels_array()
    assert pixels.min() >= 0.0
    assert pixels.max() <= 1.0


def test_class_patterns_are_pairwise_distinct():
    spec = DatasetSpec()
    patterns = [class_pattern(spec, c) for c in range(spec.classes)]
    for i in range(len(patterns)):
        for j in range(i + 1, len(patterns)):
            assert not np.array_equal(patterns[i], patterns[j])


def test_low_noise_dataset_trains_to_high_accuracy():
    spec = DatasetSpec(classes=10, samples_per_class=60, noise=0.05, seed=5)
    sub = generate_synthetic(spec)
    train_part, test_part = split(sub, 0.8, seed=1)
    model_spec = ModelSpec(input_shape=(1, 16, 16), classes=10, hidden=(128,))
    model = train(
        init_model(model_spec, 0),
        train_part.pixels_array(),
        train_part.labels_array(),
        TrainRegimen(epochs=20, learning_rate=0.05, shuffle_seed=2),
    )
    accuracy = np.mean(predict(model, test_part.pixels_array()) == test_part.labels_array())
    assert accuracy >= 0.95


# ------------------------------- IDX format ------------------------------- #

def write_pair(tmp_path: Path, pixels: np.ndarray, labels: np.ndarray) -> tuple[str, str]:
    images_path = str(tmp_path / "images-idx3-ubyte")
    labels_path = str(tmp_path / "labels-idx1-ubyte")
    write_idx(images_path, labels_path, pixels, labels)
    return images_path, labels_path


def test_idx_round_trip_is_byte_exact(tmp_path):
    rng = rng_from(3)
    pixels = rng.integers(0, 256, size=(7, 12, 9), dtype=np.uint8)
    labels = rng.integers(0, 10, size=7, dtype=np.uint8)
    images_path, labels_path = write_pair(tmp_path, pixels, labels)
    sub = load_idx(images_path, labels_path)
    assert len(sub) == 7
    restored = np.stack([(img.pixels[0] * 255.0).round().astype(np.uint8) for img in sub.images])
    assert np.array_equal(restored, pixels)
    assert [img.label for img in sub.images] == labels.tolist()
    assert all(img.pixels.min() >= 0 and img.pixels.max() <= 1 for img in sub.images)


def test_idx_header_arithmetic_two_images(tmp_path):
    pixels = np.zeros((2, 28, 28), dtype=np.uint8)
    labels = np.array([7, 1], dtype=np.uint8)
    images_path, labels_path = write_pair(tmp_path, pixels, labels)
    sub = load_idx(images_path, labels_path)
    assert len(sub) == 2
    assert sub.images[0].pixels.shape == (1, 28, 28)


def test_idx_rejects_wrong_image_magic(tmp_path):
    images_path = tmp_path / "bad-images"
    images_path.write_bytes(struct.pack(">IIII", 0x00000802, 1, 2, 2) + bytes(4))
    labels_path = tmp_path / "labels"
    labels_path.write_bytes(struct.pack(">II", 0x00000801, 1) + bytes(1))
    with pytest.raises(IdxMagicError, match="0x00000802"):
        load_idx(str(images_path), str(labels_path))


def test_idx_rejects_wrong_label_magic(tmp_path):
    pixels = np.zeros((1, 2, 2), dtype=np.uint8)
    labels = np.zeros(1, dtype=np.uint8)
    images_path, labels_path = write_pair(tmp_path, pixels, labels)
    bad_labels = tmp_path / "bad-labels"
    bad_labels.write_bytes(struct.pack(">II", 0x00000802, 1) + bytes(1))
    with pytest.raises(IdxMagicError, match="label magic"):
        load_idx(images_path, str(bad_labels))


def test_idx_rejects_truncated_payload(tmp_path):
    images_path = tmp_path / "truncated"
    images_path.write_bytes(struct.pack(">IIII", 0x00000803, 2, 28, 28) + bytes(100))
    labels_path = tmp_path / "labels"
    labels_path.write_bytes(struct.pack(">II", 0x00000801, 2) + bytes(2))
    with pytest.raises(IdxTruncatedError, match="1568"):
        load_idx(str(images_path), str(labels_path))


def test_idx_rejects_count_mismatch(tmp_path):
    pixels = np.zeros((3, 4, 4), dtype=np.uint8)
    labels = np.zeros(3, dtype=np.uint8)
    images_path, labels_path = write_pair(tmp_path, pixels, labels)
    short_labels = tmp_path / "short-labels"
    short_labels.write_bytes(struct.pack(">II", 0x00000801, 2) + bytes(2))
    with pytest.raises(IdxCountMismatchError, match="3 images .* 2 labels"):
        load_idx(images_path, str(short_labels))


MNIST_T10K = Path("/root/data/mnist/t10k-images-idx3-ubyte")


@pytest.mark.skipif(not MNIST_T10K.exists(), reason="official MNIST files not available offline")
def test_official_mnist_t10k_has_10000_images_first_label_7():
    sub = load_idx(str(MNIST_T10K), str(MNIST_T10K.parent / "t10k-labels-idx1-ubyte"))
    assert len(sub) == 10000
    assert sub.images[0].label == 7


# --------------------------------- splits --------------------------------- #

def make_sub(n, seed=0):
    rng = rng_from(seed)
    images = [LabeledImage(pixels=rng.random((1, 8, 8)), label=int(rng.integers(0, 3))) for _ in range(n)]
    return SubDataset(images=images, owner=1)


def test_split_sizes_follow_round_half_up():
    assert split(make_sub(100), 0.8, seed=1)[0].images.__len__() == 80
    first, second = split(make_sub(5), 0.8, seed=1)
    assert (len(first), len(second)) == (4, 1)


def test_round_half_up_rule():
    assert round_half_up(2.5) == 3
    assert round_half_up(2.49) == 2
    assert round_half_up(4.0) == 4


def test_split_is_deterministic_in_seed():
    sub = make_sub(30)
    a1, b1 = split(sub, 0.5, seed=7)
    a2, b2 = split(sub, 0.5, seed=7)
    assert [id(i) for i in a1.images] == [id(i) for i in a2.images]
    a3, _ = split(sub, 0.5, seed=8)
    assert [id(i) for i in a1.images] != [id(i) for i in a3.images]


def test_split_is_an_exact_partition():
    sub = make_sub(41)
    first, second = split(sub, 0.33, seed=3)
    original = sorted((pixel_hash(i.pixels), i.label) for i in sub.images)
    recombined = sorted((pixel_hash(i.pixels), i.label) for i in first.images + second.images)
    assert original == recombined


def test_split_rejects_degenerate_fractions_and_empty_parts():
    with pytest.raises(ValueError, match="fraction"):
        split(make_sub(10), 1.0, seed=0)
    with pytest.raises(ValueError, match="empty"):
        split(make_sub(2), 0.9, seed=0)  # round(1.8) = 2 leaves nothing behind
