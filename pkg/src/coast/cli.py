"""Command-line entry point: data generation, both training stages, ablations, evaluation."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .checks import GRAD_TOLERANCE, grad_check_suite
from .data import load_benchmark, make_benchmark, save_benchmark
from .experiment import ExperimentConfig, run_ablation_suite
from .metrics import MetricsReport, evaluate, export_uncertainty_map
from .segnet import ModelBundle
from .selftrain import PseudoLabelBank
from .trainer import VARIANTS, selftrain_run, variant_config
from .warmup import warmup_run

log = logging.getLogger("coast")


def load_config(path: str | None) -> ExperimentConfig:
    """JSON with optional sections benchmark / model / warmup / train, plus seeds and variants."""
    if path is None:
        return ExperimentConfig()
    return ExperimentConfig.from_dict(json.loads(Path(path).read_text()))


def _bundle(cfg: ExperimentConfig, init: str | None, seed: int | None) -> ModelBundle:
    model_cfg = cfg.model if seed is None else replace(cfg.model, seed=seed)
    bundle = ModelBundle(model_cfg)
    if init is not None:
        bundle.load(init)
    return bundle


def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    bench_cfg = replace(cfg.benchmark, num_targets=cfg.model.num_targets)
    if args.seed is not None:
        bench_cfg = replace(bench_cfg, seed=args.seed)
    save_benchmark(make_benchmark(bench_cfg), args.out)
    print(f"wrote benchmark to {args.out}")
    return 0


def cmd_warmup(args, cfg: ExperimentConfig) -> int:
    bench = load_benchmark(args.data)
    wcfg = cfg.warmup if args.seed is None else replace(cfg.warmup, seed=args.seed)
    bundle = _bundle(cfg, args.init, args.seed)
    warmup_run(bundle, bench.source, bench.targets, wcfg, adversarial=not args.source_only, log_path=args.log)
    bundle.save(args.out)
    print(f"wrote checkpoint {args.out}")
    return 0


def cmd_selftrain(args, cfg: ExperimentConfig) -> int:
    bench = load_benchmark(args.data)
    tcfg = cfg.train if args.variant is None else variant_config(cfg.train, args.variant)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    bundle = _bundle(cfg, args.init, None)
    bank = PseudoLabelBank.load(args.bank) if args.bank else None
    _, _, bank = selftrain_run(bundle, bench.source, bench.targets, bank, tcfg, args.metrics, args.checkpoint_dir)
    bundle.save(args.out)
    if args.export_bank:
        bank.export(args.export_bank)
    print(f"wrote checkpoint {args.out}")
    return 0


def cmd_ablate(args, cfg: ExperimentConfig) -> int:
    if args.variants:
        cfg = replace(cfg, variants=tuple(args.variants))
    if args.seeds:
        cfg = replace(cfg, seeds=tuple(args.seeds))
    rows = run_ablation_suite(cfg, args.out, args.workdir)
    for row in rows:
        print(f"seed={row['seed']} variant={row['variant']} avg_mIoU={row['avg_miou']:.2f} unseen_mIoU={row['unseen_miou']:.2f}")
    return 0


def cmd_eval(args, cfg: ExperimentConfig) -> int:
    bench = load_benchmark(args.data)
    bundle = _bundle(cfg, args.checkpoint, None)
    head = args.head if args.head == "A" else int(args.head)
    datasets = [bench.unseen] if args.split == "unseen" else bench.target_eval
    report = MetricsReport()
    for ds in datasets:
        report.add(evaluate(bundle, ds, head))
    for d in report.domains:
        print(f"{d.domain_id}: mIoU={100 * d.miou:.2f}")
    print(f"avg mIoU={100 * report.avg_miou:.2f}")
    if args.out:
        report.to_csv(args.out)
    if args.uncertainty_dir:
        out = Path(args.uncertainty_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, ds in enumerate(bench.target_eval):
            styles = {j: other.images[0] for j, other in enumerate(bench.target_eval) if j != i}
            for n in range(min(args.num_maps, len(ds))):
                export_uncertainty_map(bundle, ds.images[n], i, styles, out / f"{ds.domain_id}_{n:03d}.pgm", cfg.train.gamma)
    return 0


def cmd_grad_check(args, cfg: ExperimentConfig) -> int:
    errors = grad_check_suite(args.seed or 0)
    worst = 0.0
    for name, err in errors.items():
        worst = max(worst, err)
        print(f"{'PASS' if err <= GRAD_TOLERANCE else 'FAIL'} {name}: max rel err {err:.3e}")
    return 0 if worst <= GRAD_TOLERANCE else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coast", description=__doc__)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic multi-target benchmark to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("warmup", help="adversarial warm-up (or source-only training)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--log", help="per-iteration CSV")
    p.add_argument("--seed", type=int)
    p.add_argument("--source-only", action="store_true")
    p.set_defaults(func=cmd_warmup)

    p = sub.add_parser("selftrain", help="cooperative self-training from a warm-up checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--init", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--metrics", help="per-iteration loss CSV")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--variant", choices=list(VARIANTS))
    p.add_argument("--bank", help="pseudo-label bank directory to resume from")
    p.add_argument("--export-bank", help="write the final pseudo-label bank here")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_selftrain)

    p = sub.add_parser("ablate", help="run stage-2 variants over several seeds")
    p.add_argument("--out", required=True, help="CSV with one row per variant per seed")
    p.add_argument("--workdir", help="keep checkpoints and metrics CSVs here")
    p.add_argument("--variants", nargs="+", choices=list(VARIANTS))
    p.add_argument("--seeds", nargs="+", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="mIoU of a checkpoint on target eval splits or the unseen domain")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["target", "unseen"], default="target")
    p.add_argument("--head", default="A", help="'A' for the agnostic head or a target index")
    p.add_argument("--out", help="per-class IoU CSV")
    p.add_argument("--uncertainty-dir", help="write rectification-uncertainty PGMs here")
    p.add_argument("--num-maps", type=int, default=4)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of every differentiable op")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    return args.func(args, load_config(args.config))


if __name__ == "__main__":
    sys.exit(main())
