"""Command-line runner: config parsing, scenario presets, sweeps, persistence.

Subcommands:
    run <config.toml>     execute one game and persist CSV + JSON
    sweep <preset|glob>   execute a preset grid or a glob of config files
    report <results.csv>  print a markdown summary in mean +/- std (acc) form
"""

from __future__ import annotations

import argparse
import csv
import glob as globlib
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any

from poisonpool.data import DatasetSpec
from poisonpool.defenses import DefenseConfig
from poisonpool.game import AttackerSpec, GameConfig, GameResult, run_game
from poisonpool.nn import TrainRegimen
from poisonpool.trigger import PoisonRates

CSV_COLUMNS = [
    "run_id",
    "seed",
    "defense",
    "n_attackers",
    "attacker_id",
    "poison_rate",
    "trigger_label",
    "asr",
    "robustness_acc",
    "std_acc",
    "mean_asr",
    "std_asr",
    "runtime_s",
]

DEFAULT_TARGET_LABEL = 2
DEFAULT_POISON_RATE = 0.2
PRESET_NAMES = ("table1", "table2", "table3")


class ConfigError(ValueError):
    """A config file problem; the message names the offending key."""


@dataclass
class RunManifest:
    """Per-run record written to JSON: deterministic id, config echo, result."""

    run_id: str
    created_at: float
    config: dict
    result: dict


# ------------------------------ config files ----------------------------- #

def _section(raw: dict, name: str, allowed: dict[str, type | tuple[type, ...]]) -> dict:
    body = raw.get(name, {})
    if not isinstance(body, dict):
        raise ConfigError(f"[{name}] must be a table")
    for key, value in body.items():
        if key not in allowed:
            raise ConfigError(f"unknown key {name}.{key}")
        expected = allowed[key]
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            continue
        if not isinstance(value, expected) or isinstance(value, bool) and expected is not bool:
            raise ConfigError(f"{name}.{key} must be of type {getattr(expected, '__name__', expected)}")
    return body


def _in_range(name: str, value: float, low: float, high: float,
              low_open: bool = False, high_open: bool = False) -> float:
    ok_low = value > low if low_open else value >= low
    ok_high = value < high if high_open else value <= high
    if not (ok_low and ok_high):
        lo = "(" if low_open else "["
        hi = ")" if high_open else "]"
        raise ConfigError(f"{name} must be in {lo}{low}, {high}{hi}, got {value}")
    return value


def _attacker_from_entry(entry: dict, index: int, classes: int) -> AttackerSpec:
    prefix = f"attackers[{index}]"
    allowed = {"poison_rate": float, "p0": float, "p1": float, "p2": float, "target_label": int}
    for key in entry:
        if key not in allowed:
            raise ConfigError(f"unknown key {prefix}.{key}")
    triple = [k for k in ("p0", "p1", "p2") if k in entry]
    if "poison_rate" in entry and triple:
        raise ConfigError(f"{prefix}: give either poison_rate or the p0/p1/p2 triple, not both")
    if triple and len(triple) != 3:
        raise ConfigError(f"{prefix}: the poison-rate triple needs all of p0, p1, p2; got only {triple}")
    if triple:
        rates = PoisonRates(
            p0=_in_range(f"{prefix}.p0", float(entry["p0"]), 0, 1, low_open=True),
            p1=_in_range(f"{prefix}.p1", float(entry["p1"]), 0, 1, low_open=True),
            p2=_in_range(f"{prefix}.p2", float(entry["p2"]), 0, 1, low_open=True),
        )
    else:
        p = float(entry.get("poison_rate", DEFAULT_POISON_RATE))
        _in_range(f"{prefix}.poison_rate", p, 0, 1, low_open=True)
        rates = PoisonRates.scalar(p)
    target = int(entry.get("target_label", DEFAULT_TARGET_LABEL))
    if not 0 <= target < classes:
        raise ConfigError(f"{prefix}.target_label must be in [0, {classes}), got {target}")
    return AttackerSpec(agent_id=index + 1, rates=rates, target_label=target)


def parse_config(path: str | Path) -> GameConfig:
    """Parse a TOML config file into a GameConfig; unknown keys are rejected
    and every range violation names the offending key."""
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path} is not valid TOML: {exc}") from exc

    for name in raw:
        if name not in ("dataset", "model", "pool", "attackers", "defense", "run"):
            raise ConfigError(f"unknown section [{name}]")

    ds = _section(raw, "dataset", {
        "kind": str, "classes": int, "height": int, "width": int, "channels": int,
        "samples_per_class": int, "noise": float, "seed": int,
        "images_path": str, "labels_path": str,
    })
    md = _section(raw, "model", {
        "arch": str, "hidden": (int, list), "conv_filters": int,
        "epochs": int, "batch_size": int, "learning_rate": float,
    })
    pl = _section(raw, "pool", {"size": int, "defender_fraction": float})
    df = _section(raw, "defense", {
        "variant": str, "mix_fraction": float, "alpha": float, "n_simulated": int,
        "p_sim": float, "mode": str, "similarity": str, "bins": int, "bandwidth": float,
    })
    rn = _section(raw, "run", {"seed": int, "single_reference": bool})

    if "seed" not in rn:
        raise ConfigError("missing required key run.seed")
    if df.get("variant") == "agent_augmentation" and "n_simulated" not in df:
        raise ConfigError("defense.n_simulated is required when defense.variant = 'agent_augmentation'")

    try:
        dataset = DatasetSpec(
            kind=ds.get("kind", "synthetic"),
            classes=ds.get("classes", 10),
            height=ds.get("height", 16),
            width=ds.get("width", 16),
            channels=ds.get("channels", 1),
            samples_per_class=ds.get("samples_per_class", 200),
            noise=float(ds.get("noise", 0.05)),
            seed=ds.get("seed", 0),
            images_path=ds.get("images_path", ""),
            labels_path=ds.get("labels_path", ""),
        )
    except ValueError as exc:
        raise ConfigError(f"dataset: {exc}") from exc
    if dataset.kind == "mnist-idx" and (not dataset.images_path or not dataset.labels_path):
        raise ConfigError("dataset.images_path and dataset.labels_path are required when kind = 'mnist-idx'")

    hidden = md.get("hidden", 128)
    hidden_tuple = tuple(hidden) if isinstance(hidden, list) else (int(hidden),)
    if any(not isinstance(h, int) or isinstance(h, bool) for h in hidden_tuple):
        raise ConfigError("model.hidden must be an int or a list of ints")
    try:
        regimen = TrainRegimen(
            epochs=md.get("epochs", 30),
            batch_size=md.get("batch_size", 32),
            learning_rate=float(md.get("learning_rate", 0.05)),
        )
        defense = DefenseConfig(
            variant=df.get("variant", "none"),
            mix_fraction=float(df.get("mix_fraction", 0.5)),
            alpha=float(df.get("alpha", 1.0)),
            n_simulated=df.get("n_simulated", 5),
            p_sim=float(df.get("p_sim", 0.2)),
            mode=df.get("mode", "known"),
            similarity=df.get("similarity", "mmd"),
            bins=df.get("bins", 16),
            bandwidth=float(df["bandwidth"]) if "bandwidth" in df else None,
        )
        attackers = tuple(
            _attacker_from_entry(entry, i, dataset.classes)
            for i, entry in enumerate(raw.get("attackers", []))
        )
        return GameConfig(
            dataset=dataset,
            arch=md.get("arch", "mlp"),
            hidden=hidden_tuple,
            conv_filters=md.get("conv_filters", 8),
            regimen=regimen,
            pool_size=pl.get("size", 1000),
            defender_fraction=_in_range(
                "pool.defender_fraction", float(pl.get("defender_fraction", 0.4)),
                0, 1, low_open=True, high_open=True,
            ),
            attackers=attackers,
            defense=defense,
            seed=rn["seed"],
            single_reference=rn.get("single_reference", False),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


# -------------------------------- presets -------------------------------- #

def _attackers(rates: list[float], targets: list[int]) -> tuple[AttackerSpec, ...]:
    return tuple(
        AttackerSpec(agent_id=i + 1, rates=PoisonRates.scalar(p), target_label=t)
        for i, (p, t) in enumerate(zip(rates, targets))
    )


def preset_table1(seed: int) -> list[GameConfig]:
    """Poison-rate scenario grid: attacker-count growth at p=0.2, one
    unilateral escalation to p=0.4, and all-escalate p=0.9."""
    configs = [
        GameConfig(seed=seed, attackers=_attackers([0.2] * n, [DEFAULT_TARGET_LABEL] * n))
        for n in range(1, 6)
    ]
    configs.append(
        GameConfig(seed=seed, attackers=_attackers([0.4] + [0.2] * 4, [DEFAULT_TARGET_LABEL] * 5))
    )
    configs.append(GameConfig(seed=seed, attackers=_attackers([0.9] * 5, [DEFAULT_TARGET_LABEL] * 5)))
    return configs


def preset_table2(seed: int) -> list[GameConfig]:
    """Trigger-label scenario grid: shared vs all-distinct target labels at N=2 and N=4."""
    configs = []
    for n in (2, 4):
        configs.append(GameConfig(seed=seed, attackers=_attackers([0.2] * n, [DEFAULT_TARGET_LABEL] * n)))
        configs.append(GameConfig(seed=seed, attackers=_attackers([0.2] * n, list(range(1, n + 1)))))
    return configs


def preset_table3(seed: int, include_n100: bool = False) -> list[GameConfig]:
    """Defense grid: every defense variant crossed with attacker counts."""
    defenses = [
        DefenseConfig(variant="none"),
        DefenseConfig(variant="data_augmentation", mix_fraction=0.5, alpha=1.0),
        DefenseConfig(variant="agent_augmentation", n_simulated=5, p_sim=0.2),
        DefenseConfig(variant="agent_indexing", mode="known", similarity="mmd"),
    ]
    counts = [1, 2, 5, 10] + ([100] if include_n100 else [])
    return [
        GameConfig(
            seed=seed,
            defense=defense,
            attackers=_attackers([0.2] * n, [DEFAULT_TARGET_LABEL] * n),
        )
        for defense in defenses
        for n in counts
    ]


PRESETS = {"table1": preset_table1, "table2": preset_table2, "table3": preset_table3}


# ------------------------------ persistence ------------------------------ #

def config_to_dict(config: GameConfig) -> dict:
    return asdict(config)


def run_id_for(config: GameConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True, default=str)
    digest = hashlib.sha256(canonical.encode()).hexdigest()[:10]
    return f"{config.seed:06d}-{digest}"


def _fmt(value: float | int | str | None) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def result_rows(config: GameConfig, result: GameResult) -> list[dict[str, str]]:
    """CSV rows for one run: one per attacker plus one defender row (id -1)."""
    run_id = run_id_for(config)
    shared = {
        "run_id": run_id,
        "seed": _fmt(result.seed),
        "defense": result.defense,
        "n_attackers": _fmt(result.n_attackers),
        "std_acc": _fmt(result.standard_accuracy),
        "mean_asr": _fmt(result.mean_asr),
        "std_asr": _fmt(result.std_asr),
        "runtime_s": _fmt(result.runtime_seconds),
    }
    rows = []
    for outcome in result.attackers:
        rows.append({
            **shared,
            "attacker_id": _fmt(outcome.agent_id),
            "poison_rate": _fmt(outcome.p0),
            "trigger_label": _fmt(outcome.target_label),
            "asr": _fmt(outcome.asr),
            "robustness_acc": _fmt(outcome.robustness_accuracy),
        })
    rows.append({
        **shared,
        "attacker_id": "-1",
        "poison_rate": "",
        "trigger_label": "",
        "asr": "",
        "robustness_acc": "",
    })
    return rows


def _execute(config: GameConfig) -> GameResult:
    return run_game(config)


def run_and_persist(configs: list[GameConfig], out_dir: str | Path, jobs: int = 1) -> list[RunManifest]:
    """Run every config, write results.csv plus one JSON manifest per run.

    Failures are reported per run; the caller inspects the manifest count
    against the config count (the CLI exits nonzero when they differ).
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RuntimeError(f"cannot create output directory {out}: {exc}") from exc

    results: list[GameResult | None] = [None] * len(configs)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {i: pool.submit(_execute, cfg) for i, cfg in enumerate(configs)}
            for i, future in futures.items():
                try:
                    results[i] = future.result()
                except Exception as exc:  # noqa: BLE001 - surfaced per run
                    print(f"run {run_id_for(configs[i])} failed: {exc}", file=sys.stderr)
    else:
        for i, cfg in enumerate(configs):
            try:
                results[i] = _execute(cfg)
            except Exception as exc:  # noqa: BLE001
                print(f"run {run_id_for(cfg)} failed: {exc}", file=sys.stderr)

    manifests: list[RunManifest] = []
    all_rows: list[dict[str, str]] = []
    for cfg, result in zip(configs, results):
        if result is None:
            continue
        manifest = RunManifest(
            run_id=run_id_for(cfg),
            created_at=time.time(),
            config=config_to_dict(cfg),
            result=asdict(result),
        )
        manifest_path = out / f"{manifest.run_id}.json"
        try:
            manifest_path.write_text(json.dumps(asdict(manifest), indent=2, default=str))
        except OSError as exc:
            raise RuntimeError(f"cannot write manifest {manifest_path}: {exc}") from exc
        manifests.append(manifest)
        all_rows.extend(result_rows(cfg, result))

    csv_path = out / "results.csv"
    try:
        with open(csv_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(all_rows)
    except OSError as exc:
        raise RuntimeError(f"cannot write CSV {csv_path}: {exc}") from exc
    return manifests


# -------------------------------- reporting ------------------------------ #

def report(csv_path: str | Path) -> str:
    """Markdown summary: mean ASR +/- std (standard accuracy) per defense and N,
    plus a divergence-vs-ASR table when JSON manifests sit next to the CSV."""
    csv_path = Path(csv_path)
    with open(csv_path) as f:
        rows = list(csv.DictReader(f))
    defender_rows = [r for r in rows if r["attacker_id"] == "-1"]
    cells: dict[tuple[str, int], list[dict]] = {}
    for r in defender_rows:
        cells.setdefault((r["defense"], int(r["n_attackers"])), []).append(r)
    defenses = sorted({key[0] for key in cells})
    counts = sorted({key[1] for key in cells})

    def _mean(group: list[dict], field: str) -> float | None:
        values = [float(r[field]) for r in group if r[field] != ""]
        return sum(values) / len(values) if values else None

    lines = ["| defense | " + " | ".join(f"N={n}" for n in counts) + " |"]
    lines.append("|---" * (len(counts) + 1) + "|")
    for defense in defenses:
        cols = []
        for n in counts:
            group = cells.get((defense, n))
            if not group:
                cols.append("-")
                continue
            mean_asr = _mean(group, "mean_asr")
            std_asr = _mean(group, "std_asr")
            acc = _mean(group, "std_acc")
            if mean_asr is None:
                cols.append(f"- ({100 * acc:.1f})" if acc is not None else "-")
            else:
                cols.append(f"{100 * mean_asr:.1f} ± {100 * (std_asr or 0):.2f} ({100 * (acc or 0):.1f})")
        lines.append(f"| {defense} | " + " | ".join(cols) + " |")

    diagnostics = _divergence_table(csv_path.parent, rows)
    if diagnostics:
        lines.append("")
        lines.append("Divergence vs ASR (per attacker):")
        lines.extend(diagnostics)
    return "\n".join(lines)


def _divergence_table(out_dir: Path, rows: list[dict]) -> list[str]:
    run_ids = {r["run_id"] for r in rows}
    entries = []
    for run_id in sorted(run_ids):
        manifest_path = out_dir / f"{run_id}.json"
        if not manifest_path.exists():
            continue
        manifest = json.loads(manifest_path.read_text())
        for outcome in manifest["result"]["attackers"]:
            if outcome.get("divergence") is not None:
                entries.append((run_id, manifest["result"]["n_attackers"],
                                outcome["agent_id"], outcome["divergence"], outcome["asr"]))
    if not entries:
        return []
    lines = ["| run_id | N | agent | divergence | asr |", "|---|---|---|---|---|"]
    for run_id, n, agent, div, asr in entries:
        lines.append(f"| {run_id} | {n} | {agent} | {div:.5f} | {asr:.4f} |")
    return lines


# ---------------------------------- main ---------------------------------- #

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poisonpool", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a single config file")
    p_run.add_argument("config", nargs="?", help="path to a TOML config")
    p_run.add_argument("--config", dest="config_flag", help="path to a TOML config")
    p_run.add_argument("--out", default="results", help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")

    p_sweep = sub.add_parser("sweep", help="run a preset grid or a glob of configs")
    p_sweep.add_argument("target", nargs="?", help="preset name (table1|table2|table3) or config glob")
    p_sweep.add_argument("--preset", choices=PRESET_NAMES, default=None)
    p_sweep.add_argument("--out", default="results", help="output directory")
    p_sweep.add_argument("--seed", type=int, default=None,
                         help="seed for preset configs (default 1) / seed override for globs")
    p_sweep.add_argument("--jobs", type=int, default=1, help="concurrent runs")
    p_sweep.add_argument("--include-n100", action="store_true", help="add the N=100 column to table3")

    p_report = sub.add_parser("report", help="summarize a results.csv as markdown")
    p_report.add_argument("csv", help="path to results.csv")
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    path = args.config_flag or args.config
    if not path:
        print("run: a config path is required", file=sys.stderr)
        return 2
    config = parse_config(path)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    manifests = run_and_persist([config], args.out)
    if len(manifests) != 1:
        return 1
    print(f"wrote {Path(args.out) / 'results.csv'} and {manifests[0].run_id}.json")
    return 0


def _sweep_configs(args: argparse.Namespace) -> list[GameConfig]:
    preset = args.preset
    if preset is None and args.target in PRESET_NAMES:
        preset = args.target
    if preset is not None:
        seed = args.seed if args.seed is not None else 1
        if preset == "table3":
            return preset_table3(seed, include_n100=args.include_n100)
        return PRESETS[preset](seed)
    if not args.target:
        raise ConfigError("sweep needs a preset name or a config glob")
    paths = sorted(globlib.glob(args.target))
    if not paths:
        raise ConfigError(f"no config files match {args.target!r}")
    configs = [parse_config(p) for p in paths]
    if args.seed is not None:
        configs = [replace(c, seed=args.seed) for c in configs]
    return configs


def _cmd_sweep(args: argparse.Namespace) -> int:
    configs = _sweep_configs(args)
    manifests = run_and_persist(configs, args.out, jobs=args.jobs)
    print(f"{len(manifests)}/{len(configs)} runs succeeded; results in {args.out}")
    return 0 if len(manifests) == len(configs) else 1


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        if args.command == "report":
            print(report(args.csv))
            return 0
    except (ConfigError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
