"""Scalar evaluation: attack success rate, accuracy, aggregates, and the
divergence diagnostic between per-agent and joint class-conditional pixel
distributions."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from poisonpool.data import SubDataset


@dataclass
class EvalRecord:
    """Per-attacker attack outcome. n_eval counts samples left after dropping
    those whose true label already equals the target."""

    attacker_id: int
    asr: float
    n_eval: int
    single_reference_asr: float | None = None


@dataclass
class DivergenceRecord:
    """Divergence of one agent's class-conditional pixel distribution from the
    pool-wide joint distribution for the same class."""

    class_label: int
    agent_id: int
    divergence: float
    backend: str = "js-pixel-histogram"


def compute_asr(
    predictions: np.ndarray,
    true_labels: np.ndarray,
    target_label: int,
    attacker_id: int = 0,
) -> EvalRecord:
    """Fraction of triggered inputs classified as the target label, excluding
    inputs whose true label already is the target."""
    predictions = np.asarray(predictions)
    true_labels = np.asarray(true_labels)
    if predictions.shape != true_labels.shape:
        raise ValueError(f"predictions shape {predictions.shape} != labels shape {true_labels.shape}")
    keep = true_labels != target_label
    n_eval = int(keep.sum())
    if n_eval == 0:
        raise ValueError(f"all {predictions.size} samples carry the target label {target_label}; ASR undefined")
    asr = float(np.mean(predictions[keep] == target_label))
    return EvalRecord(attacker_id=attacker_id, asr=asr, n_eval=n_eval)


def compute_accuracy(predictions: np.ndarray, true_labels: np.ndarray) -> float:
    predictions = np.asarray(predictions)
    true_labels = np.asarray(true_labels)
    if predictions.shape != true_labels.shape:
        raise ValueError(f"predictions shape {predictions.shape} != labels shape {true_labels.shape}")
    return float(np.mean(predictions == true_labels))


def aggregate_asr(records: Iterable[EvalRecord | float]) -> tuple[float, float]:
    """Mean and population (divide-by-N) standard deviation of ASR values."""
    values = [rec.asr if isinstance(rec, EvalRecord) else float(rec) for rec in records]
    if not values:
        raise ValueError("aggregate_asr needs at least one record")
    mean = float(np.mean(values))
    std = float(np.sqrt(np.mean((np.asarray(values) - mean) ** 2)))
    return mean, std


def histogram_prob(values: np.ndarray, bins: int) -> np.ndarray:
    """Normalized histogram of values over [0, 1]."""
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    counts, _ = np.histogram(values, bins=bins, range=(0.0, 1.0))
    total = counts.sum()
    if total == 0:
        raise ValueError("cannot build a histogram from zero values")
    return counts / total


def js_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Jensen-Shannon divergence in nats; 0 for identical, ln 2 for disjoint."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"histogram shapes differ: {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)

    def _kl(a: np.ndarray) -> float:
        nz = a > 0
        return float(np.sum(a[nz] * np.log(a[nz] / m[nz])))

    return 0.5 * _kl(p) + 0.5 * _kl(q)


def pixelwise_histograms(pixels: np.ndarray, bins: int) -> np.ndarray:
    """Per-pixel intensity histograms: (n, channels, H, W) -> (channels*H*W, bins)."""
    flat = pixels.reshape(pixels.shape[0], -1)
    n, d = flat.shape
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    # one bincount over (pixel index, bin index) pairs beats d separate histograms
    idx = np.clip((flat * bins).astype(np.int64), 0, bins - 1)
    offsets = np.arange(d, dtype=np.int64) * bins
    counts = np.bincount((idx + offsets).ravel(), minlength=d * bins).reshape(d, bins)
    return counts / n


def mean_pixel_js(pixels_a: np.ndarray, pixels_b: np.ndarray, bins: int) -> float:
    """Mean over pixel positions of the JS divergence between intensity histograms."""
    if pixels_a.shape[1:] != pixels_b.shape[1:]:
        raise ValueError(f"image shapes differ: {pixels_a.shape[1:]} vs {pixels_b.shape[1:]}")
    ha = pixelwise_histograms(pixels_a, bins)
    hb = pixelwise_histograms(pixels_b, bins)
    m = 0.5 * (ha + hb)
    with np.errstate(divide="ignore", invalid="ignore"):
        kla = np.where(ha > 0, ha * np.log(np.where(ha > 0, ha / m, 1.0)), 0.0).sum(axis=1)
        klb = np.where(hb > 0, hb * np.log(np.where(hb > 0, hb / m, 1.0)), 0.0).sum(axis=1)
    return float(np.mean(0.5 * kla + 0.5 * klb))


def class_divergence(pool: Sequence[SubDataset], class_label: int, agent_id: int, bins: int = 16) -> DivergenceRecord:
    """Divergence of agent ``agent_id``'s class slice from the union of all
    agents' class slices, as mean per-pixel JS divergence."""
    own: list[np.ndarray] = []
    union: list[np.ndarray] = []
    for sub in pool:
        stack = [img.pixels for img in sub.images if img.label == class_label]
        if not stack:
            continue
        union.extend(stack)
        if sub.owner == agent_id:
            own.extend(stack)
    if not own:
        raise ValueError(f"agent {agent_id} contributed no samples labeled {class_label}")
    value = mean_pixel_js(np.stack(own), np.stack(union), bins)
    return DivergenceRecord(class_label=class_label, agent_id=agent_id, divergence=value)
