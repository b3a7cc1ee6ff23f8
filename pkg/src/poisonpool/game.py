"""Full game assembly and execution.

One run: draw everyone's raw data, carve the pool per the 40-60
defender-attacker split with 80-20 train-test splits on each side, poison
attacker contributions, apply the configured defense, train the defender's
model(s), and evaluate standard accuracy plus per-attacker attack success.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from poisonpool import nn
from poisonpool.data import (
    DatasetSpec,
    SubDataset,
    flatten_pool,
    generate_synthetic,
    load_idx,
    round_half_up,
    split,
    take,
    with_owner,
)
from poisonpool.defenses import (
    DefenseConfig,
    ModelEnsemble,
    SimilarityReport,
    agent_augment,
    build_ensemble,
    cutmix_transform,
    infer_indexed,
)
from poisonpool.metrics import aggregate_asr, class_divergence, compute_accuracy, compute_asr
from poisonpool.seeding import derive_seed
from poisonpool.trigger import PoisonRates, TriggerSpec, generate_trigger, poison_subdataset, trigger_everything

CONTRIBUTED_FRACTION = 0.8  # every agent contributes 80% of its draw, holds 20% for test
MIN_ATTACKER_SHARE = 5


@dataclass(frozen=True)
class AttackerSpec:
    """One attacker: id (>= 1), poison rates, chosen target label."""

    agent_id: int
    rates: PoisonRates
    target_label: int

    def __post_init__(self) -> None:
        if self.agent_id < 1:
            raise ValueError(f"attacker agent_id must be >= 1, got {self.agent_id}")
        if self.target_label < 0:
            raise ValueError(f"target_label must be >= 0, got {self.target_label}")


@dataclass(frozen=True)
class GameConfig:
    """Declarative description of one experiment."""

    dataset: DatasetSpec = DatasetSpec()
    arch: str = "mlp"
    hidden: tuple[int, ...] = (128,)
    conv_filters: int = 8
    avg_pool: int = 4
    regimen: nn.TrainRegimen = nn.TrainRegimen()
    pool_size: int = 1000
    defender_fraction: float = 0.4
    attackers: tuple[AttackerSpec, ...] = ()
    defense: DefenseConfig = DefenseConfig()
    seed: int = 0
    single_reference: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.defender_fraction < 1.0:
            raise ValueError(f"defender_fraction must be in (0, 1), got {self.defender_fraction}")
        if self.pool_size < 1:
            raise ValueError(f"pool_size must be >= 1, got {self.pool_size}")
        ids = [a.agent_id for a in self.attackers]
        if len(set(ids)) != len(ids):
            raise ValueError(f"attacker agent_ids must be unique, got {ids}")
        for a in self.attackers:
            if a.target_label >= self.dataset.classes:
                raise ValueError(
                    f"attacker {a.agent_id} target_label {a.target_label} "
                    f"out of range for {self.dataset.classes} classes"
                )

    def model_spec(self) -> nn.ModelSpec:
        return nn.ModelSpec(
            input_shape=(self.dataset.channels, self.dataset.height, self.dataset.width),
            classes=self.dataset.classes,
            hidden=tuple(self.hidden),
            arch=self.arch,
            conv_filters=self.conv_filters,
            avg_pool=self.avg_pool,
        )


@dataclass
class AssembledPool:
    """The pool plus everything evaluation needs: held-out test sets and triggers."""

    pool: list[SubDataset]
    defender_test: SubDataset
    attacker_tests: dict[int, SubDataset]
    triggers: dict[int, TriggerSpec]


@dataclass
class AttackerOutcome:
    agent_id: int
    target_label: int
    p0: float
    p1: float
    p2: float
    asr: float
    robustness_accuracy: float
    n_eval: int
    trigger_hash: str
    divergence: float | None = None
    single_reference_asr: float | None = None


@dataclass
class GameResult:
    """The persisted record of one run; every rate lies in [0, 1]."""

    seed: int
    defense: str
    n_attackers: int
    standard_accuracy: float
    attackers: list[AttackerOutcome] = field(default_factory=list)
    mean_asr: float | None = None
    std_asr: float | None = None
    runtime_seconds: float = 0.0
    similarity_reports: list[SimilarityReport] = field(default_factory=list)


def _source_corpus(config: GameConfig) -> SubDataset | None:
    """For file-backed datasets, the one shared corpus agents partition."""
    if config.dataset.kind == "mnist-idx":
        return load_idx(config.dataset.images_path, config.dataset.labels_path)
    return None


def _agent_raw(config: GameConfig, agent_id: int, count: int,
               corpus: SubDataset | None, corpus_cursor: list[int]) -> SubDataset:
    """Raw draw for one agent: an i.i.d. synthetic draw from a per-agent seed,
    or (for file corpora) the agent's chunk of one seeded partition."""
    if corpus is None:
        base_seed = derive_seed(config.seed, "data", config.dataset.seed)
        spec = replace(config.dataset, seed=base_seed ^ agent_id)
        generated = generate_synthetic(spec)
        drawn = take(generated, count, derive_seed(config.seed, "draw", agent_id))
    else:
        start = corpus_cursor[0]
        if start + count > len(corpus):
            raise ValueError(
                f"corpus of {len(corpus)} images is too small: agent {agent_id} "
                f"needs {count} more at offset {start}"
            )
        shuffled = take(corpus, len(corpus), derive_seed(config.seed, "corpus-partition"))
        drawn = SubDataset(images=shuffled.images[start : start + count], owner=0)
        corpus_cursor[0] = start + count
    return with_owner(drawn, agent_id)


def assemble_pool(config: GameConfig) -> AssembledPool:
    """Build the shared pool: defender contributes defender_fraction of it,
    attackers split the rest equally, and every agent holds out 20% of its
    own draw for test-time evaluation."""
    n_attackers = len(config.attackers)
    defender_share = round_half_up(config.defender_fraction * config.pool_size)
    if defender_share < MIN_ATTACKER_SHARE:
        raise ValueError(f"defender share {defender_share} is below the minimum {MIN_ATTACKER_SHARE}")
    attacker_share = 0
    if n_attackers:
        attacker_share = round_half_up((1.0 - config.defender_fraction) * config.pool_size / n_attackers)
        if attacker_share < MIN_ATTACKER_SHARE:
            raise ValueError(
                f"per-attacker share {attacker_share} is below the minimum {MIN_ATTACKER_SHARE}; "
                f"shrink the attacker count or grow the pool"
            )

    corpus = _source_corpus(config)
    cursor = [0]
    dims = (config.dataset.channels, config.dataset.height, config.dataset.width)

    defender_draw = round_half_up(defender_share / CONTRIBUTED_FRACTION)
    raw = _agent_raw(config, 0, defender_draw, corpus, cursor)
    contribution, defender_test = split(raw, CONTRIBUTED_FRACTION, derive_seed(config.seed, "split", 0))
    pool: list[SubDataset] = [contribution]

    attacker_tests: dict[int, SubDataset] = {}
    triggers: dict[int, TriggerSpec] = {}
    for attacker in config.attackers:
        draw_n = round_half_up(attacker_share / CONTRIBUTED_FRACTION)
        raw = _agent_raw(config, attacker.agent_id, draw_n, corpus, cursor)
        contrib, test = split(raw, CONTRIBUTED_FRACTION, derive_seed(config.seed, "split", attacker.agent_id))
        trig = generate_trigger(
            dims,
            attacker.rates,
            attacker.target_label,
            derive_seed(config.seed, "trigger", attacker.agent_id),
            owner=attacker.agent_id,
        )
        pool.append(poison_subdataset(contrib, trig, derive_seed(config.seed, "poison", attacker.agent_id)))
        attacker_tests[attacker.agent_id] = test
        triggers[attacker.agent_id] = trig
    return AssembledPool(pool=pool, defender_test=defender_test, attacker_tests=attacker_tests, triggers=triggers)


def _train_single(config: GameConfig, training) -> nn.Model:
    model = nn.init_model(config.model_spec(), derive_seed(config.seed, "init", "full"))
    schedule = nn.with_shuffle_seed(config.regimen, derive_seed(config.seed, "shuffle", "full"))
    return nn.train(model, training.pixels, training.labels, schedule)


def _single_reference_asr(config: GameConfig, attacker: AttackerSpec) -> float:
    solo = replace(
        config,
        attackers=(attacker,),
        defense=DefenseConfig(),
        single_reference=False,
    )
    result = run_game(solo)
    return result.attackers[0].asr


def run_game(config: GameConfig) -> GameResult:
    """Assemble, defend, train, evaluate. Deterministic in the master seed."""
    start = time.perf_counter()
    defense = config.defense
    assembled = assemble_pool(config)
    pool = assembled.pool

    ensemble: ModelEnsemble | None = None
    model: nn.Model | None = None
    if defense.variant == "agent_indexing":
        ensemble = build_ensemble(pool, config.model_spec(), config.regimen, config.seed)
    elif defense.variant == "data_augmentation":
        training = cutmix_transform(
            pool, config.dataset.classes, defense.mix_fraction, defense.alpha,
            derive_seed(config.seed, "cutmix"),
        )
        model = _train_single(config, training)
    elif defense.variant == "agent_augmentation":
        defended = [
            agent_augment(sub, defense.n_simulated, defense.p_sim, derive_seed(config.seed, "agent-augment"))
            if sub.owner == 0
            else sub
            for sub in pool
        ]
        model = _train_single(config, flatten_pool(defended, config.dataset.classes))
    else:
        model = _train_single(config, flatten_pool(pool, config.dataset.classes))

    reports: list[SimilarityReport] = []

    def _predict(batch: np.ndarray, agent_id: int) -> np.ndarray:
        if ensemble is None:
            assert model is not None
            return nn.predict(model, batch)
        routed_id = agent_id if defense.mode == "known" else None
        preds, report = infer_indexed(
            ensemble, batch, agent_id=routed_id, similarity=defense.similarity,
            bins=defense.bins, bandwidth=defense.bandwidth,
        )
        reports.append(report)
        return preds

    clean_pixels = assembled.defender_test.pixels_array()
    clean_labels = assembled.defender_test.labels_array()
    standard_accuracy = compute_accuracy(_predict(clean_pixels, 0), clean_labels)

    outcomes: list[AttackerOutcome] = []
    for attacker in config.attackers:
        trig = assembled.triggers[attacker.agent_id]
        pixels, original = trigger_everything(assembled.attacker_tests[attacker.agent_id], trig)
        preds = _predict(pixels, attacker.agent_id)
        record = compute_asr(preds, original, attacker.target_label, attacker_id=attacker.agent_id)
        try:
            divergence = class_divergence(pool, attacker.target_label, attacker.agent_id).divergence
        except ValueError:
            divergence = None
        outcomes.append(
            AttackerOutcome(
                agent_id=attacker.agent_id,
                target_label=attacker.target_label,
                p0=attacker.rates.p0,
                p1=attacker.rates.p1,
                p2=attacker.rates.p2,
                asr=record.asr,
                robustness_accuracy=compute_accuracy(preds, original),
                n_eval=record.n_eval,
                trigger_hash=f"{trig.pattern_hash:016x}",
                divergence=divergence,
                single_reference_asr=(
                    _single_reference_asr(config, attacker) if config.single_reference else None
                ),
            )
        )

    mean_asr, std_asr = (None, None)
    if outcomes:
        mean_asr, std_asr = aggregate_asr([o.asr for o in outcomes])
    return GameResult(
        seed=config.seed,
        defense=defense.variant,
        n_attackers=len(config.attackers),
        standard_accuracy=standard_accuracy,
        attackers=outcomes,
        mean_asr=mean_asr,
        std_asr=std_asr,
        runtime_seconds=time.perf_counter() - start,
        similarity_reports=reports,
    )
