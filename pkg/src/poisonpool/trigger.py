"""Randomized trigger generation and application.

Each attacker owns a fixed binary mask plus a color pattern; poisoning an
image evaluates x * (1 - mask) + pattern * mask literally and relabels the
image with the attacker's target class (dirty-label). The poison-rate triple
(p0, p1, p2) controls how many contributed samples are poisoned, the linear
extent of the trigger region, and how densely the region is filled.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from poisonpool.data import PROVENANCE_ATTACKER, LabeledImage, SubDataset, round_half_up
from poisonpool.seeding import rng_from


@dataclass(frozen=True)
class PoisonRates:
    """p0: fraction of contributed samples poisoned; p1: linear extent of the
    trigger region; p2: fill fraction within the region. Each in (0, 1]."""

    p0: float
    p1: float
    p2: float

    def __post_init__(self) -> None:
        for name, value in (("p0", self.p0), ("p1", self.p1), ("p2", self.p2)):
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {value}")

    @classmethod
    def scalar(cls, p: float) -> "PoisonRates":
        return cls(p0=p, p1=p, p2=p)


@dataclass
class TriggerSpec:
    """One attacker's fixed trigger: mask (H, W) of {0,1}, color pattern
    (channels, H, W) in [0,1], target label, rates, owning agent."""

    mask: np.ndarray
    pattern: np.ndarray
    target_label: int
    rates: PoisonRates
    owner: int
    pattern_hash: int

    def masked_pixels(self) -> int:
        return int(self.mask.sum())


def _hash_trigger(mask: np.ndarray, pattern: np.ndarray) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(np.ascontiguousarray(mask).tobytes())
    h.update(np.ascontiguousarray(pattern).tobytes())
    return int.from_bytes(h.digest(), "big")


def generate_trigger(
    dims: tuple[int, int, int],
    rates: PoisonRates,
    target_label: int,
    agent_seed: int,
    owner: int = 0,
) -> TriggerSpec:
    """Generate a trigger: a ceil(p1*H) x ceil(p1*W) rectangle at a seeded
    uniform position, with exactly round(p2 * area) pixels perturbed to
    seeded uniform colors. Deterministic in (dims, rates, agent_seed)."""
    channels, height, width = dims
    region_h = math.ceil(rates.p1 * height)
    region_w = math.ceil(rates.p1 * width)
    if region_h < 1 or region_w < 1:
        raise ValueError(f"p1={rates.p1} leaves no trigger region on a {height}x{width} image")
    k = round_half_up(rates.p2 * region_h * region_w)
    if k == 0:
        raise ValueError(f"p2={rates.p2} rounds to zero perturbed pixels in a {region_h}x{region_w} region")
    rng = rng_from(agent_seed)
    top = int(rng.integers(0, height - region_h + 1))
    left = int(rng.integers(0, width - region_w + 1))
    cells = rng.choice(region_h * region_w, size=k, replace=False)
    rows = top + cells // region_w
    cols = left + cells % region_w
    mask = np.zeros((height, width))
    mask[rows, cols] = 1.0
    pattern = np.zeros((channels, height, width))
    pattern[:, rows, cols] = rng.random((channels, k))
    return TriggerSpec(
        mask=mask,
        pattern=pattern,
        target_label=target_label,
        rates=rates,
        owner=owner,
        pattern_hash=_hash_trigger(mask, pattern),
    )


def apply_trigger(image: LabeledImage, trig: TriggerSpec) -> LabeledImage:
    """Pixelwise x * (1 - mask) + pattern * mask; label becomes the target label."""
    if image.pixels.shape != trig.pattern.shape:
        raise ValueError(f"image shape {image.pixels.shape} does not match trigger shape {trig.pattern.shape}")
    pixels = image.pixels * (1.0 - trig.mask) + trig.pattern * trig.mask
    return LabeledImage(pixels=pixels, label=trig.target_label, provenance=image.provenance)


def poison_subdataset(sub: SubDataset, trig: TriggerSpec, seed: int) -> SubDataset:
    """Poison a seeded selection of exactly round(p0 * n) images; the rest are untouched."""
    if len(sub) == 0:
        raise ValueError("cannot poison an empty sub-dataset")
    n = len(sub)
    k = round_half_up(trig.rates.p0 * n)
    chosen = set(rng_from(seed).choice(n, size=k, replace=False).tolist())
    images: list[LabeledImage] = []
    for i, img in enumerate(sub.images):
        if i in chosen:
            poisoned = apply_trigger(img, trig)
            poisoned.provenance = PROVENANCE_ATTACKER
            images.append(poisoned)
        else:
            images.append(img)
    return SubDataset(images=images, owner=sub.owner, provenance=PROVENANCE_ATTACKER)


def trigger_everything(sub: SubDataset, trig: TriggerSpec) -> tuple[np.ndarray, np.ndarray]:
    """Test-time poisoning (rate 1.0): triggered pixels plus the ORIGINAL labels.

    Returns (pixels, original_labels); the original labels are what ASR and
    robustness accuracy are judged against.
    """
    pixels = np.stack([apply_trigger(img, trig).pixels for img in sub.images])
    labels = sub.labels_array()
    return pixels, labels
