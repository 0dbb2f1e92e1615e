"""Multi-seed desk experiments: source-only, warm-up and stage-2 variants from one init."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import BenchmarkConfig, make_benchmark
from .metrics import evaluate, evaluate_all
from .segnet import EncoderConfig, ModelBundle, ModelConfig
from .trainer import VARIANTS, TrainConfig, selftrain_run, variant_config
from .warmup import WarmupConfig, warmup_run

logger = logging.getLogger(__name__)

ABLATION_CSV_HEADER = ["seed", "variant", "avg_miou", "unseen_miou", "per_domain"]


@dataclass
class ExperimentConfig:
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    warmup: WarmupConfig = field(default_factory=WarmupConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[str, ...] = tuple(VARIANTS)
    source_only: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        bench = dict(d.get("benchmark", {}))
        if "shapes_per_class" in bench:
            bench["shapes_per_class"] = tuple(bench["shapes_per_class"])
        model = dict(d.get("model", {}))
        if "encoder" in model:
            enc = {k: tuple(v) if isinstance(v, list) else v for k, v in model["encoder"].items()}
            model["encoder"] = EncoderConfig(**enc)
        if "disc_widths" in model:
            model["disc_widths"] = tuple(model["disc_widths"])
        return cls(
            benchmark=BenchmarkConfig(**bench),
            model=ModelConfig(**model),
            warmup=WarmupConfig(**d.get("warmup", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            seeds=tuple(d.get("seeds", (0, 1, 2))),
            variants=tuple(d.get("variants", tuple(VARIANTS))),
            source_only=d.get("source_only", True),
        )

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self), default=list))


@dataclass
class RunResult:
    seed: int
    name: str
    avg_miou: float  # percent, C^A over target eval splits
    unseen_miou: float  # percent
    per_domain: dict[str, float]
    cpu_seconds: float


def _score(bundle: ModelBundle, bench, name: str, seed: int, started: float) -> RunResult:
    """Evaluate C^A; CPU time counts from ``started`` through evaluation."""
    report = evaluate_all(bundle, bench.target_eval)
    unseen = evaluate(bundle, bench.unseen)
    return RunResult(
        seed,
        name,
        100.0 * report.avg_miou,
        100.0 * unseen.miou,
        {k: 100.0 * v for k, v in report.per_domain.items()},
        time.process_time() - started,
    )


def run_seed(config: ExperimentConfig, seed: int, workdir: str | Path | None = None) -> dict[str, RunResult]:
    """Every model of one seed starts from the same initialization.

    Stage-2 variants all continue from copies of the same warm-up checkpoint.
    """
    t = time.process_time()
    bench = make_benchmark(replace(config.benchmark, seed=seed, num_targets=config.model.num_targets))
    init = ModelBundle(replace(config.model, seed=seed))
    wcfg = replace(config.warmup, seed=seed)
    setup_cpu = time.process_time() - t
    results: dict[str, RunResult] = {}
    if workdir is not None:
        Path(workdir).mkdir(parents=True, exist_ok=True)

    if config.source_only:
        t = time.process_time()
        src_only, _ = warmup_run(init.copy(), bench.source, bench.targets, wcfg, adversarial=False)
        results["source_only"] = _score(src_only, bench, "source_only", seed, t)
        if workdir is not None:
            src_only.save(Path(workdir) / f"source_only_seed{seed}.ckpt")

    t = time.process_time()
    warm, _ = warmup_run(init.copy(), bench.source, bench.targets, wcfg)
    results["warmup"] = _score(warm, bench, "warmup", seed, t)
    if workdir is not None:
        warm.save(Path(workdir) / f"warmup_seed{seed}.ckpt")

    for name in config.variants:
        t = time.process_time()
        tcfg = replace(variant_config(config.train, name), seed=seed)
        metrics = None if workdir is None else Path(workdir) / f"metrics_{name}_seed{seed}.csv"
        model, _, _ = selftrain_run(warm.copy(), bench.source, bench.targets, None, tcfg, metrics_path=metrics)
        if workdir is not None:
            model.save(Path(workdir) / f"selftrain_{name}_seed{seed}.ckpt")
        results[name] = _score(model, bench, name, seed, t)
    # data generation and init are shared by every model of the seed; charge them to the warm-up
    results["warmup"].cpu_seconds += setup_cpu
    for r in results.values():
        logger.info("seed=%d %s avg=%.2f unseen=%.2f cpu=%.1fs", seed, r.name, r.avg_miou, r.unseen_miou, r.cpu_seconds)
    return results


def run_experiment(config: ExperimentConfig, workdir: str | Path | None = None) -> list[dict[str, RunResult]]:
    return [run_seed(config, s, workdir) for s in config.seeds]


def median_of(results: list[dict[str, RunResult]], name: str, attr: str = "avg_miou") -> float:
    return float(np.median([getattr(r[name], attr) for r in results]))


def run_ablation_suite(config: ExperimentConfig, out_csv: str | Path | None = None, workdir: str | Path | None = None) -> list[dict]:
    """One row per stage-2 variant per seed, all sharing each seed's warm-up checkpoint."""
    config = replace(config, source_only=False)
    rows = []
    for res in run_experiment(config, workdir):
        for name in config.variants:
            r = res[name]
            rows.append(
                {
                    "seed": r.seed,
                    "variant": name,
                    "avg_miou": r.avg_miou,
                    "unseen_miou": r.unseen_miou,
                    "per_domain": json.dumps(r.per_domain, sort_keys=True),
                }
            )
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=ABLATION_CSV_HEADER)
            w.writeheader()
            for row in rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return rows


def desk_config(seeds: tuple[int, ...] = (0, 1, 2), variants: tuple[str, ...] = ("v", "i", "ii")) -> ExperimentConfig:
    """Scaled-down setting: 1 source + 2 targets, K=4, 32x32, sized for a single CPU."""
    return ExperimentConfig(
        benchmark=BenchmarkConfig(),
        model=ModelConfig(),
        warmup=WarmupConfig(iterations=1000),
        train=TrainConfig(iterations=1000, n_b=200),
        seeds=seeds,
        variants=variants,
    )
