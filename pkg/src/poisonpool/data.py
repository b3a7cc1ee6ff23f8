"""Dataset construction: synthetic image generator, IDX loading, split arithmetic.

The synthetic generator renders each class as a fixed arrangement of bright
blocks on a dark background plus Gaussian pixel noise, so class identity is
easy for a small net while leaving room for triggers to compete. IDX loading
is bit-exact against the classic big-endian format. Splits are seeded
shuffle-then-prefix with round-half-up sizing.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np

from poisonpool.seeding import derive_seed, rng_from

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

PROVENANCE_CLEAN = "clean"
PROVENANCE_ATTACKER = "attacker-poisoned"
PROVENANCE_SIMULATED = "defender-simulated-poison"


class IdxError(ValueError):
    """Base for IDX file-format failures."""


class IdxMagicError(IdxError):
    """File does not start with the expected IDX magic number."""


class IdxTruncatedError(IdxError):
    """File ends before the payload promised by its header."""


class IdxCountMismatchError(IdxError):
    """Image file and label file disagree on the item count."""


@dataclass
class LabeledImage:
    """One image: pixels (channels, H, W) in [0,1] plus its class label."""

    pixels: np.ndarray
    label: int
    provenance: str = PROVENANCE_CLEAN


@dataclass
class SubDataset:
    """An ordered set of labeled images contributed by one agent.

    Owner 0 is the defender; attackers are 1..N. The provenance tag records
    whether the set was poisoned and by whom.
    """

    images: list[LabeledImage]
    owner: int = 0
    provenance: str = PROVENANCE_CLEAN

    def __len__(self) -> int:
        return len(self.images)

    def pixels_array(self) -> np.ndarray:
        return np.stack([img.pixels for img in self.images])

    def labels_array(self) -> np.ndarray:
        return np.array([img.label for img in self.images], dtype=np.int64)


@dataclass
class TrainingSet:
    """Flattened training material: stacked pixels, soft label rows, owner tags."""

    pixels: np.ndarray  # (n, channels, H, W)
    labels: np.ndarray  # (n, classes), rows sum to 1
    owners: np.ndarray  # (n,)


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"  # "synthetic" | "mnist-idx"
    classes: int = 10
    height: int = 16
    width: int = 16
    channels: int = 1
    samples_per_class: int = 200
    noise: float = 0.05
    seed: int = 0
    images_path: str = ""
    labels_path: str = ""

    def __post_init__(self) -> None:
        if self.kind not in ("synthetic", "mnist-idx"):
            raise ValueError(f"dataset kind must be 'synthetic' or 'mnist-idx', got {self.kind!r}")
        if self.classes < 2:
            raise ValueError(f"classes must be >= 2, got {self.classes}")
        if self.height < 8 or self.width < 8:
            raise ValueError(f"height and width must be >= 8, got {self.height}x{self.width}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.samples_per_class < 1:
            raise ValueError(f"samples_per_class must be >= 1, got {self.samples_per_class}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")


def round_half_up(x: float) -> int:
    """Round with halves going up (3.5 -> 4), the rule used for all split sizes."""
    return int(np.floor(x + 0.5))


def pixel_hash(pixels: np.ndarray) -> bytes:
    return hashlib.blake2b(np.ascontiguousarray(pixels).tobytes(), digest_size=16).digest()


_BLOCKS_PER_CLASS = 3


@lru_cache(maxsize=None)
def _patterns_up_to(channels: int, height: int, width: int, count: int) -> tuple[np.ndarray, ...]:
    """First ``count`` class patterns for a geometry, guaranteed pairwise distinct."""
    block = max(2, min(height, width) // 4)
    patterns: list[np.ndarray] = []
    for label in range(count):
        attempt = 0
        while True:
            rng = rng_from(derive_seed(0, "class-pattern", label, attempt))
            base = np.full((channels, height, width), 0.1)
            for _ in range(_BLOCKS_PER_CLASS):
                top = int(rng.integers(0, height - block + 1))
                left = int(rng.integers(0, width - block + 1))
                value = float(rng.uniform(0.75, 1.0))
                base[:, top : top + block, left : left + block] = value
            # resample on the (vanishingly rare) event two classes collide
            if not any(np.array_equal(base, seen) for seen in patterns):
                patterns.append(base)
                break
            attempt += 1
    return tuple(patterns)


def class_pattern(spec: DatasetSpec, label: int) -> np.ndarray:
    """Deterministic base pattern for one class: bright blocks on a dark field.

    Depends only on (label, geometry), not on the generation seed, so every
    agent samples from the same underlying class distribution.
    """
    return _patterns_up_to(spec.channels, spec.height, spec.width, label + 1)[label].copy()


def generate_synthetic(spec: DatasetSpec) -> SubDataset:
    """Render samples_per_class noisy copies of each class pattern, clamped to [0,1]."""
    if spec.kind != "synthetic":
        raise ValueError(f"generate_synthetic requires kind='synthetic', got {spec.kind!r}")
    rng = rng_from(spec.seed)
    images: list[LabeledImage] = []
    for label in range(spec.classes):
        base = class_pattern(spec, label)
        for _ in range(spec.samples_per_class):
            noisy = base
            if spec.noise > 0:
                noisy = np.clip(base + rng.normal(0.0, spec.noise, size=base.shape), 0.0, 1.0)
            images.append(LabeledImage(pixels=noisy.copy(), label=label))
    return SubDataset(images=images, owner=0)


def _read_be32(buf: bytes, offset: int, path: str) -> int:
    if offset + 4 > len(buf):
        raise IdxTruncatedError(f"{path}: header truncated at byte {offset}")
    return struct.unpack_from(">I", buf, offset)[0]


def load_idx(images_path: str, labels_path: str) -> SubDataset:
    """Load an IDX image/label file pair, scaling pixels to [0,1] by /255."""
    with open(images_path, "rb") as f:
        raw = f.read()
    magic = _read_be32(raw, 0, images_path)
    if magic != IDX_IMAGE_MAGIC:
        raise IdxMagicError(f"{images_path}: image magic is 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
    count = _read_be32(raw, 4, images_path)
    rows = _read_be32(raw, 8, images_path)
    cols = _read_be32(raw, 12, images_path)
    payload = raw[16:]
    if len(payload) < count * rows * cols:
        raise IdxTruncatedError(
            f"{images_path}: expected {count * rows * cols} pixel bytes, found {len(payload)}"
        )
    pixels = np.frombuffer(payload[: count * rows * cols], dtype=np.uint8).reshape(count, rows, cols)

    with open(labels_path, "rb") as f:
        raw_labels = f.read()
    lmagic = _read_be32(raw_labels, 0, labels_path)
    if lmagic != IDX_LABEL_MAGIC:
        raise IdxMagicError(f"{labels_path}: label magic is 0x{lmagic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
    lcount = _read_be32(raw_labels, 4, labels_path)
    if len(raw_labels) - 8 < lcount:
        raise IdxTruncatedError(f"{labels_path}: expected {lcount} label bytes, found {len(raw_labels) - 8}")
    if lcount != count:
        raise IdxCountMismatchError(f"{images_path} holds {count} images but {labels_path} holds {lcount} labels")
    labels = np.frombuffer(raw_labels[8 : 8 + lcount], dtype=np.uint8)

    images = [
        LabeledImage(pixels=(pixels[i].astype(np.float64) / 255.0)[np.newaxis, :, :], label=int(labels[i]))
        for i in range(count)
    ]
    return SubDataset(images=images, owner=0)


def write_idx(images_path: str, labels_path: str, pixels: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (n, H, W) and labels (n,) in IDX format."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match {n} images")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(labels.tobytes())


def split(sub: SubDataset, fraction: float, seed: int) -> tuple[SubDataset, SubDataset]:
    """Seeded shuffle then prefix split; first part gets round(fraction * n) images."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    n = len(sub)
    k = round_half_up(fraction * n)
    if k == 0 or k == n:
        raise ValueError(f"split of {n} images at fraction {fraction} leaves an empty part")
    order = rng_from(seed).permutation(n)
    first = [sub.images[i] for i in order[:k]]
    second = [sub.images[i] for i in order[k:]]
    return (
        SubDataset(images=first, owner=sub.owner, provenance=sub.provenance),
        SubDataset(images=second, owner=sub.owner, provenance=sub.provenance),
    )


def take(sub: SubDataset, count: int, seed: int) -> SubDataset:
    """Seeded draw of ``count`` images without replacement."""
    n = len(sub)
    if not 0 < count <= n:
        raise ValueError(f"cannot draw {count} images from a set of {n}")
    order = rng_from(seed).permutation(n)[:count]
    return SubDataset(images=[sub.images[i] for i in order], owner=sub.owner, provenance=sub.provenance)


def with_owner(sub: SubDataset, owner: int) -> SubDataset:
    return SubDataset(images=sub.images, owner=owner, provenance=sub.provenance)


def flatten_pool(pool: list[SubDataset], classes: int) -> TrainingSet:
    """Stack a pool into training arrays with one-hot label rows and owner tags."""
    if not pool or all(len(sub) == 0 for sub in pool):
        raise ValueError("cannot flatten an empty pool")
    pixels = np.concatenate([sub.pixels_array() for sub in pool if len(sub)])
    hard = np.concatenate([sub.labels_array() for sub in pool if len(sub)])
    owners = np.concatenate([np.full(len(sub), sub.owner, dtype=np.int64) for sub in pool if len(sub)])
    labels = np.zeros((hard.shape[0], classes))
    labels[np.arange(hard.shape[0]), hard] = 1.0
    return TrainingSet(pixels=pixels, labels=labels, owners=owners)


def agent_dataset_spec(spec: DatasetSpec, agent_id: int) -> DatasetSpec:
    """Per-agent i.i.d. draw of the same distribution: seed XOR agent id."""
    return replace(spec, seed=spec.seed ^ agent_id)
