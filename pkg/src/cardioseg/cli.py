"""Command-line harness: data generation, training, evaluation, ablation,
cross-validation, tuning, prediction export, and the gradient-check suite.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract wants 1
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="cardioseg", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, ckpt=False):
        p.add_argument("--config", help="run config file (key = value lines)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", default="runs/out", help="output directory")
        if data:
            p.add_argument("--data", required=True, help="dataset directory")
        if ckpt:
            p.add_argument("--ckpt", required=True, help="checkpoint directory")

    p = sub.add_parser("gen-data", help="generate a phantom dataset")
    common(p)
    p.add_argument("--patients", type=int, default=None)

    p = sub.add_parser("train", help="train the full pipeline")
    common(p, data=True)
    p.add_argument("--resume", help="checkpoint directory to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, data=True, ckpt=True)
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    p.add_argument("--spacing", type=float, default=1.0, help="pixel spacing in mm")

    p = sub.add_parser("ablate", help="emit the architectural and loss ablation tables")
    common(p, data=True)

    p = sub.add_parser("cv", help="k-fold cross-validation")
    common(p, data=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--repeats", type=int, default=5)

    p = sub.add_parser("tune", help="swarm-search hyperparameters")
    common(p, data=True)
    p.add_argument("--particles", type=int, default=5)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--budget", type=int, default=None,
                   help="total objective evaluations (overrides --iters)")

    p = sub.add_parser("predict", help="export masks and probability maps")
    common(p, data=True, ckpt=True)
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="test")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p)
    return parser


def _load_config(args):
    from .config import apply_pairs, load_config

    try:
        config = load_config(args.config, args.overrides)
        if args.seed is not None:
            apply_pairs(config, {"seed": str(args.seed)})
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {exc.filename}; pass --config <file>") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return config


def _load_samples(args, config):
    from .phantom import load_dataset
    from .training import split_dataset

    samples, _ = load_dataset(args.data)
    if getattr(args, "split", None) in (None, "all"):
        return samples
    tr, va, te = split_dataset(samples, config)
    return {"train": tr, "val": va, "test": te}[args.split]


def cmd_gen_data(args) -> int:
    from .phantom import PhantomConfig, generate_dataset, save_dataset

    config = _load_config(args)
    n = args.patients if args.patients is not None else config.patients
    phantom = PhantomConfig(size=config.input_size, slices=config.slices)
    samples = generate_dataset(n, phantom, seed=config.seed)
    save_dataset(args.out, samples, phantom, config.seed)
    print(f"wrote {n} patients ({len(samples)} slices) to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .phantom import load_dataset
    from .training import train

    config = _load_config(args)
    samples, _ = load_dataset(args.data)
    model, log = train(config, samples, args.out, resume_from=args.resume)
    emit_training_csv(Path(args.out), log, config)
    last = log[-1] if log else {}
    print(f"trained {config.epochs} epochs; final val dice "
          f"{last.get('val_dice', float('nan')):.4f}; checkpoints in {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .training import evaluate_checkpoint, load_checkpoint

    config = _load_config(args)
    samples = _load_samples(args, config)
    report = evaluate_checkpoint(args.ckpt, samples, spacing_mm=args.spacing)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    report.write_case_csv(out / "per_case.csv")
    (out / "report.txt").write_text(report.summary_table() + "\n")
    print(report.summary_table())
    print(f"\nreport.json, report.txt, per_case.csv written to {out}")
    return 0


def cmd_ablate(args) -> int:
    from .phantom import load_dataset
    from .training import ablate

    config = _load_config(args)
    samples, _ = load_dataset(args.data)
    t5, t6 = ablate(config, samples, args.out)
    print(format_ablation_table("Architectural ablation", t5))
    print()
    print(format_ablation_table("Loss ablation", t6))
    emit_ablation_csv(Path(args.out), t5, t6)
    return 0


def cmd_cv(args) -> int:
    from .phantom import load_dataset
    from .training import cross_validate

    config = _load_config(args)
    samples, _ = load_dataset(args.data)
    result = cross_validate(config, samples, args.out, k=args.folds, repeats=args.repeats)
    for key, agg in result["summary"].items():
        print(f"{key}: {agg['mean']:.4f} +/- {agg['std']:.4f}")
    return 0


def cmd_tune(args) -> int:
    from .phantom import load_dataset
    from .training import tune

    config = _load_config(args)
    samples, _ = load_dataset(args.data)
    particles = args.particles
    iters = args.iters
    if args.budget is not None:
        iters = max(1, args.budget // particles - 1)
    best, dice = tune(config, samples, args.out, n_particles=particles, n_iters=iters)
    print(f"best tuning dice {dice:.4f}; config written to {Path(args.out) / 'best_config.cfg'}")
    return 0


def cmd_predict(args) -> int:
    from .autodiff import Tensor
    from .model import export_prediction
    from .training import load_checkpoint

    config = _load_config(args)
    samples = _load_samples(args, config)
    model, _, _ = load_checkpoint(args.ckpt)
    out = Path(args.out)
    for s in samples:
        x = Tensor(s.image[None])
        mask = model.predict(x)[0]
        probs = model.predict_probs(x)[0]
        export_prediction(out, f"{s.patient_id}_{s.phase}_{s.slice_index}", mask, probs)
    print(f"exported {len(samples)} predictions to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .acceptance import gradient_suite

    config = _load_config(args)
    results = gradient_suite(seed=config.seed)
    width = max(len(name) for name, _ in results)
    worst_overall = 0.0
    for name, worst in results:
        print(f"{name:<{width}}  worst rel err {worst:.3e}")
        worst_overall = max(worst_overall, worst)
    print(f"overall worst: {worst_overall:.3e}")
    return 0


def emit_training_csv(out: Path, log: list[dict], config) -> None:
    """Plot-ready CSVs: the lr schedule and the per-epoch loss curves."""
    from .optim import cosine_lr

    out.mkdir(parents=True, exist_ok=True)
    eta_max = config.lr_decoder
    eta_min = config.lr_decoder * config.eta_min_frac
    with open(out / "lr_schedule.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "lr"])
        for t in range(config.epochs + 1):
            writer.writerow([t, cosine_lr(t, config.epochs, eta_max, eta_min)])
    if log:
        keys = sorted({k for rec in log for k in rec})
        with open(out / "loss_curves.csv", "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=keys)
            writer.writeheader()
            writer.writerows(log)


def format_ablation_table(title: str, rows: list[dict]) -> str:
    cols = [c for c in rows[0] if c != "configuration"]
    header = f"{'Configuration':<40}" + "".join(f"{c:>12}" for c in cols)
    lines = [title, header, "-" * len(header)]
    for row in rows:
        lines.append(f"{row['configuration']:<40}"
                     + "".join(f"{row[c]:>12.4f}" for c in cols))
    return "\n".join(lines)


def emit_ablation_csv(out: Path, t5: list[dict], t6: list[dict]) -> None:
    for name, rows in (("table5.csv", t5), ("table6.csv", t6)):
        with open(out / name, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "cv": cmd_cv,
    "tune": cmd_tune,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, code 2
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
