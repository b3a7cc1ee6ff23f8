"""Defense transforms and the agent-indexing inference path.

Three defenses: CutMix-style data augmentation (baseline), agent
augmentation (the defender simulates extra backdoor attackers without
touching true labels), and agent indexing (a leave-one-agent-out model
ensemble routed by known or similarity-inferred agent index).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from poisonpool import nn
from poisonpool.data import (
    PROVENANCE_SIMULATED,
    LabeledImage,
    SubDataset,
    TrainingSet,
    flatten_pool,
    round_half_up,
)
from poisonpool.metrics import mean_pixel_js
from poisonpool.seeding import derive_seed, rng_from
from poisonpool.trigger import PoisonRates, apply_trigger, generate_trigger

DEFENSE_VARIANTS = ("none", "data_augmentation", "agent_augmentation", "agent_indexing")
IMPLEMENTED_SIMILARITIES = ("mmd", "js")
# named in the source material but deliberately not implemented here
STUB_SIMILARITIES = (
    "spectral_signature",
    "activation_clustering",
    "learning_to_match",
    "distribution_matching_machine",
)

AGENT_AUGMENT_CLEAN_FRACTION = 0.4


@dataclass(frozen=True)
class DefenseConfig:
    """Defense selector plus the parameters of whichever variant is active."""

    variant: str = "none"
    mix_fraction: float = 0.5  # data_augmentation
    alpha: float = 1.0  # data_augmentation Beta parameter
    n_simulated: int = 5  # agent_augmentation
    p_sim: float = 0.2  # agent_augmentation trigger rate
    mode: str = "known"  # agent_indexing: known | unknown
    similarity: str = "mmd"  # agent_indexing unknown-mode backend
    bins: int = 16  # js backend histogram bins
    bandwidth: float | None = None  # mmd backend; None = median heuristic

    def __post_init__(self) -> None:
        if self.variant not in DEFENSE_VARIANTS:
            raise ValueError(f"defense variant must be one of {DEFENSE_VARIANTS}, got {self.variant!r}")
        if not 0.0 <= self.mix_fraction <= 1.0:
            raise ValueError(f"mix_fraction must be in [0, 1], got {self.mix_fraction}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.n_simulated < 1:
            raise ValueError(f"n_simulated must be >= 1, got {self.n_simulated}")
        if not 0.0 < self.p_sim <= 1.0:
            raise ValueError(f"p_sim must be in (0, 1], got {self.p_sim}")
        if self.mode not in ("known", "unknown"):
            raise ValueError(f"agent_indexing mode must be 'known' or 'unknown', got {self.mode!r}")
        if self.similarity not in IMPLEMENTED_SIMILARITIES + STUB_SIMILARITIES:
            raise ValueError(f"unknown similarity backend {self.similarity!r}")
        if self.bins < 2:
            raise ValueError(f"bins must be >= 2, got {self.bins}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError(f"bandwidth must be > 0, got {self.bandwidth}")


@dataclass
class SimilarityReport:
    """Audit record of one routed inference batch."""

    backend: str
    scores: dict[int, float] = field(default_factory=dict)
    selected: int | None = None
    routed_model: str = "full"
    warning: str | None = None


@dataclass
class ModelEnsemble:
    """Leave-one-agent-out models keyed by the excluded agent, plus the
    full model trained on everything. References hold each agent's
    contributed pixels for unknown-index similarity matching."""

    models: dict[int, nn.Model]
    full: nn.Model
    references: dict[int, np.ndarray]
    classes: int


# --------------------------- data augmentation --------------------------- #

def cutmix_patch(height: int, width: int, lam: float, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Patch geometry for one CutMix pair: (top, left, patch_h, patch_w).

    The patch covers the (1 - lam) area fraction, discretized per side as
    ceil(sqrt(1 - lam) * extent); lam = 1 degenerates to an empty patch.
    """
    side = math.sqrt(max(0.0, 1.0 - lam))
    ph = math.ceil(side * height)
    pw = math.ceil(side * width)
    if ph == 0 or pw == 0:
        return 0, 0, 0, 0
    top = int(rng.integers(0, height - ph + 1))
    left = int(rng.integers(0, width - pw + 1))
    return top, left, ph, pw


def cutmix_transform(
    pool: list[SubDataset], classes: int, mix_fraction: float, alpha: float, seed: int
) -> TrainingSet:
    """CutMix over the flattened pool: round(mix_fraction * n) seeded pairs
    (a, b) get a rectangular patch of b pasted into a and the soft label
    lam * onehot(y_a) + (1 - lam) * onehot(y_b); everything else keeps its
    hard one-hot label."""
    training = flatten_pool(pool, classes)
    n, _, height, width = training.pixels.shape
    originals = training.pixels.copy()
    hard = training.labels.argmax(axis=1)
    rng = rng_from(seed)
    k = round_half_up(mix_fraction * n)
    targets = rng.choice(n, size=k, replace=False)
    for a in targets:
        b = int(rng.integers(0, n))
        lam = float(rng.beta(alpha, alpha))
        top, left, ph, pw = cutmix_patch(height, width, lam, rng)
        if ph and pw:
            training.pixels[a, :, top : top + ph, left : left + pw] = originals[
                b, :, top : top + ph, left : left + pw
            ]
        row = np.zeros(classes)
        row[hard[a]] += lam
        row[hard[b]] += 1.0 - lam
        training.labels[a] = row
    return training


# --------------------------- agent augmentation -------------------------- #

def agent_augment(defender_share: SubDataset, n_simulated: int, p_sim: float, seed: int) -> SubDataset:
    """Simulate fake attackers inside the defender's contribution.

    Keeps 40% of the share clean and divides the remaining 60% equally among
    n_simulated simulated attackers; each slice gets that simulator's own
    random trigger pattern applied with TRUE labels preserved.
    """
    n = len(defender_share)
    clean_n = round_half_up(AGENT_AUGMENT_CLEAN_FRACTION * n)
    rest = n - clean_n
    if rest < n_simulated:
        raise ValueError(f"{rest} poisonable samples cannot feed {n_simulated} simulated attackers")
    order = rng_from(derive_seed(seed, "allocate")).permutation(n)
    images: list[LabeledImage] = [defender_share.images[i] for i in order[:clean_n]]
    base, extra = divmod(rest, n_simulated)
    cursor = clean_n
    dims = defender_share.images[0].pixels.shape
    rates = PoisonRates.scalar(p_sim)
    for k in range(n_simulated):
        size = base + (1 if k < extra else 0)
        trig = generate_trigger(dims, rates, target_label=0, agent_seed=derive_seed(seed, "sim", k))
        for i in order[cursor : cursor + size]:
            img = defender_share.images[i]
            fake = apply_trigger(img, trig)
            images.append(LabeledImage(pixels=fake.pixels, label=img.label, provenance=PROVENANCE_SIMULATED))
        cursor += size
    return SubDataset(images=images, owner=defender_share.owner, provenance=PROVENANCE_SIMULATED)


# ----------------------------- agent indexing ---------------------------- #

def build_ensemble(
    pool: list[SubDataset], model_spec: nn.ModelSpec, regimen: nn.TrainRegimen, seed: int
) -> ModelEnsemble:
    """Train one model per agent on the pool minus that agent's sub-datasets,
    plus the full model on everything. Deterministic in (seed, excluded id)."""
    owners = sorted({sub.owner for sub in pool})
    if len(owners) < 2:
        raise ValueError(f"agent indexing needs >= 2 pool owners, got {owners}")

    def _train(subsets: list[SubDataset], tag: object) -> nn.Model:
        if not subsets:
            raise ValueError(f"excluding agent {tag} leaves an empty training pool")
        training = flatten_pool(subsets, model_spec.classes)
        model = nn.init_model(model_spec, derive_seed(seed, "init", tag))
        schedule = nn.with_shuffle_seed(regimen, derive_seed(seed, "shuffle", tag))
        return nn.train(model, training.pixels, training.labels, schedule)

    models = {
        excluded: _train([sub for sub in pool if sub.owner != excluded], excluded)
        for excluded in owners
    }
    full = _train(list(pool), "full")
    references = {
        owner: np.concatenate([sub.pixels_array() for sub in pool if sub.owner == owner])
        for owner in owners
    }
    return ModelEnsemble(models=models, full=full, references=references, classes=model_spec.classes)


def median_bandwidth(a: np.ndarray, b: np.ndarray, cap: int = 200) -> float:
    """Median pairwise Euclidean distance over the pooled (subsampled) batches."""
    pooled = np.concatenate([_flat(a)[:cap], _flat(b)[:cap]])
    sq = _sq_dists(pooled, pooled)
    upper = sq[np.triu_indices(len(pooled), k=1)]
    med = float(np.median(upper)) if upper.size else 0.0
    return math.sqrt(med) if med > 0 else 1.0


def _flat(batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    return batch.reshape(batch.shape[0], -1)


def _sq_dists(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    xx = np.sum(x * x, axis=1)[:, None]
    yy = np.sum(y * y, axis=1)[None, :]
    return np.maximum(xx + yy - 2.0 * (x @ y.T), 0.0)


def mmd_squared(batch_a: np.ndarray, batch_b: np.ndarray, bandwidth: float | None = None,
                unbiased: bool = True) -> float:
    """Squared maximum mean discrepancy with an RBF kernel on flattened pixels.

    The unbiased estimator drops self-pairs and may dip slightly below zero;
    the biased variant is exactly zero for identical batches.
    """
    x, y = _flat(batch_a), _flat(batch_b)
    if x.shape[0] == 0 or y.shape[0] == 0:
        raise ValueError("MMD needs nonempty batches")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"batch feature sizes differ: {x.shape[1]} vs {y.shape[1]}")
    if bandwidth is None:
        bandwidth = median_bandwidth(x, y)
    if not bandwidth > 0:
        raise ValueError(f"bandwidth must be > 0, got {bandwidth}")
    gamma = 1.0 / (2.0 * bandwidth * bandwidth)
    kxx = np.exp(-gamma * _sq_dists(x, x))
    kyy = np.exp(-gamma * _sq_dists(y, y))
    kxy = np.exp(-gamma * _sq_dists(x, y))
    m, n = x.shape[0], y.shape[0]
    if unbiased:
        if m < 2 or n < 2:
            raise ValueError("unbiased MMD needs >= 2 samples per batch")
        xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    else:
        xx = kxx.mean()
        yy = kyy.mean()
    return float(xx + yy - 2.0 * kxy.mean())


def similarity_mmd(batch_a: np.ndarray, batch_b: np.ndarray, bandwidth: float | None = None) -> float:
    """Similarity as negated unbiased squared MMD (higher = more similar)."""
    return -mmd_squared(batch_a, batch_b, bandwidth=bandwidth, unbiased=True)


def similarity_js(batch_a: np.ndarray, batch_b: np.ndarray, bins: int = 16) -> float:
    """Similarity as negated mean per-pixel JS divergence (higher = more similar)."""
    a, b = np.asarray(batch_a, dtype=np.float64), np.asarray(batch_b, dtype=np.float64)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("JS similarity needs nonempty batches")
    return -mean_pixel_js(a.reshape(a.shape[0], 1, 1, -1), b.reshape(b.shape[0], 1, 1, -1), bins)


def match_agent(
    references: dict[int, np.ndarray],
    query: np.ndarray,
    similarity: str = "mmd",
    bins: int = 16,
    bandwidth: float | None = None,
) -> tuple[int, dict[int, float]]:
    """Pick the reference sub-dataset most similar to the query batch.

    References are subsampled to a common size first: finite-sample
    similarity estimates are biased by sample count, and unequal reference
    sizes (defender vs attacker shares) would otherwise skew the argmax.
    Returns (selected agent id, per-agent scores); ties go to the lowest id.
    """
    if similarity in STUB_SIMILARITIES:
        raise NotImplementedError(f"similarity backend {similarity!r} is recognized but not implemented")
    if similarity not in IMPLEMENTED_SIMILARITIES:
        raise ValueError(f"unknown similarity backend {similarity!r}")
    common = min(ref.shape[0] for ref in references.values())
    rng = rng_from(0)
    scores: dict[int, float] = {}
    for agent in sorted(references):
        ref = references[agent]
        if ref.shape[0] > common:
            ref = ref[rng.choice(ref.shape[0], size=common, replace=False)]
        if similarity == "mmd":
            scores[agent] = similarity_mmd(query, ref, bandwidth=bandwidth)
        else:
            scores[agent] = similarity_js(query, ref, bins=bins)
    selected = min(scores)  # lowest id wins ties because iteration is ascending
    for agent in sorted(scores):
        if scores[agent] > scores[selected]:
            selected = agent
    return selected, scores


def infer_indexed(
    ensemble: ModelEnsemble,
    query: np.ndarray,
    agent_id: int | None = None,
    similarity: str = "mmd",
    bins: int = 16,
    bandwidth: float | None = None,
) -> tuple[np.ndarray, SimilarityReport]:
    """Route a query batch to the model that never saw the querying agent's data.

    Known mode (agent_id given): use the model excluding that agent; the
    defender (agent 0) and unregistered ids fall back to the full model, the
    latter with a warning flag. Unknown mode: argmax similarity against each
    contributed sub-dataset picks the agent to exclude; if the defender wins
    the argmax the full model is used.
    """
    if agent_id is not None:
        if agent_id == 0:
            report = SimilarityReport(backend="known-index", selected=0, routed_model="full")
            return nn.predict(ensemble.full, query), report
        if agent_id not in ensemble.models:
            report = SimilarityReport(
                backend="known-index",
                selected=None,
                routed_model="full",
                warning=f"agent {agent_id} is not registered; using the full model",
            )
            return nn.predict(ensemble.full, query), report
        report = SimilarityReport(backend="known-index", selected=agent_id, routed_model=f"exclude-{agent_id}")
        return nn.predict(ensemble.models[agent_id], query), report

    selected, scores = match_agent(ensemble.references, query, similarity, bins=bins, bandwidth=bandwidth)
    if selected == 0:
        report = SimilarityReport(backend=similarity, scores=scores, selected=0, routed_model="full")
        return nn.predict(ensemble.full, query), report
    report = SimilarityReport(
        backend=similarity, scores=scores, selected=selected, routed_model=f"exclude-{selected}"
    )
    return nn.predict(ensemble.models[selected], query), report
