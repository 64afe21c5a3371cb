"""Training, evaluation, ablation, cross-validation, and swarm tuning."""
from __future__ import annotations

import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .config import RunConfig, apply_pairs, write_config_file
from .losses import composite_loss, default_adjacency, load_adjacency
from .metrics import MetricReport, aggregate_report, confusion, dice_iou, ef_error, hd95, pixel_stats
from .model import CardiacSegmenter
from .optim import AdamW, build_groups, cosine_lr
from .phantom import SegSample, augment, kfold_patients, samples_for, split_patients
from .tensor_io import load_weight_dir, save_weight_dir


class TrainingDiverged(RuntimeError):
    pass


def worker_threads() -> int:
    raw = os.environ.get("CARDIOSEG_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return max(1, min(4, os.cpu_count() or 1))


def _adjacency_for(config: RunConfig) -> np.ndarray:
    if config.adjacency_file:
        return load_adjacency(config.adjacency_file)
    return default_adjacency(config.num_classes)


def _stack_batch(samples: list[SegSample]) -> tuple[Tensor, np.ndarray]:
    images = np.stack([s.image for s in samples])
    masks = np.stack([s.mask for s in samples])
    return Tensor(images), masks


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, 0x51]))


def _sample_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, index, 0xA6]))


def split_dataset(samples: list[SegSample], config: RunConfig):
    patients = sorted({s.patient_id for s in samples})
    tr, va, te = split_patients(patients, (config.train_frac, config.val_frac,
                                           config.test_frac), config.seed)
    return samples_for(samples, tr), samples_for(samples, va), samples_for(samples, te)


def foreground_dice(model: CardiacSegmenter, samples: list[SegSample],
                    num_classes: int, batch_size: int = 8) -> float:
    """Mean foreground Dice over pooled pixels of a sample list."""
    tp = np.zeros(num_classes, dtype=np.int64)
    fp = np.zeros(num_classes, dtype=np.int64)
    fn = np.zeros(num_classes, dtype=np.int64)
    for i in range(0, len(samples), batch_size):
        x, masks = _stack_batch(samples[i : i + batch_size])
        pred = model.predict(x)
        for c in range(num_classes):
            pc, gc = pred == c, masks == c
            tp[c] += np.count_nonzero(pc & gc)
            fp[c] += np.count_nonzero(pc & ~gc)
            fn[c] += np.count_nonzero(~pc & gc)
    denom = 2 * tp[1:] + fp[1:] + fn[1:]
    dice = np.where(denom > 0, 2 * tp[1:] / np.where(denom > 0, denom, 1), 1.0)
    return float(dice.mean())


def _run_epoch(model: CardiacSegmenter, opt: AdamW, config: RunConfig,
               train_samples: list[SegSample], epoch: int, total_steps: int,
               weights, adjacency, out: Path | None = None) -> tuple[dict[str, float], int]:
    """One seeded epoch: shuffle, per-sample augmentation, batched updates.

    Shuffle and augmentation streams derive from (run seed, epoch, sample
    index), so an interrupted run resumed at an epoch boundary replays the
    exact same data order.
    """
    order = _epoch_rng(config.seed, epoch).permutation(len(train_samples))
    epoch_samples = [train_samples[i] for i in order]
    if config.augment:
        epoch_samples = [
            augment(s, _sample_rng(config.seed, epoch, int(i)),
                    config.rotate_deg, (config.scale_lo, config.scale_hi),
                    config.elastic_alpha, config.elastic_sigma)
            for i, s in zip(order, epoch_samples)
        ]
    term_sums: dict[str, float] = {}
    n_batches = 0
    for b in range(0, len(epoch_samples), config.batch_size):
        batch = epoch_samples[b : b + config.batch_size]
        x, masks = _stack_batch(batch)
        loss, breakdown = composite_loss(model(x), masks, weights, adjacency)
        if not math.isfinite(breakdown["total"]):
            if out is not None:
                _dump_diagnostic(out, batch, breakdown)
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}: {breakdown}")
        loss.backward()
        opt.step(cosine_lr(min(opt.step_count, total_steps), total_steps, 1.0,
                           config.eta_min_frac))
        opt.zero_grad()
        for k, v in breakdown.items():
            term_sums[k] = term_sums.get(k, 0.0) + v
        n_batches += 1
    return term_sums, n_batches


def _save_checkpoint(dirpath, model: CardiacSegmenter, opt: AdamW, epoch: int,
                     total_steps: int, config: RunConfig) -> None:
    state = dict(model.state_dict())
    for gi, group in enumerate(opt.groups):
        for pi, name in enumerate(group.names):
            state[f"opt_m.{name}"] = opt.m[gi][pi]
            state[f"opt_v.{name}"] = opt.v[gi][pi]
    extra = {
        "epoch": epoch,
        "opt_step": opt.step_count,
        "total_steps": total_steps,
        "config": config.to_flat(),
        "config_hash": config.config_hash(),
        "rng": {"seed": config.seed, "next_epoch": epoch},
        "encoder_checksum": model.encoder.checksum(),
    }
    save_weight_dir(dirpath, state, extra)


def load_checkpoint(dirpath, config: RunConfig | None = None) -> tuple[CardiacSegmenter, dict, dict]:
    state, extra = load_weight_dir(dirpath)
    if config is None:
        config = apply_pairs(RunConfig(), extra["config"])
    model = CardiacSegmenter(config.model_config())
    model_state = {k: v for k, v in state.items() if not k.startswith(("opt_m.", "opt_v."))}
    model.load_state_dict(model_state)
    return model, state, extra


def train(config: RunConfig, samples: list[SegSample], out_dir,
          resume_from=None) -> tuple[CardiacSegmenter, list[dict]]:
    """Full training run; writes ndjson epoch logs and per-epoch checkpoints."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_samples, val_samples, _ = split_dataset(samples, config)
    if not train_samples:
        raise ValueError("empty training split")
    adjacency = _adjacency_for(config)
    weights = config.loss_weights()
    steps_per_epoch = math.ceil(len(train_samples) / config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)

    start_epoch = 0
    if resume_from is not None:
        model, state, extra = load_checkpoint(resume_from, config)
        opt = AdamW(build_groups(model, config.lr_decoder, config.lr_backbone,
                                 config.weight_decay))
        for gi, group in enumerate(opt.groups):
            for pi, name in enumerate(group.names):
                opt.m[gi][pi] = state[f"opt_m.{name}"].copy()
                opt.v[gi][pi] = state[f"opt_v.{name}"].copy()
        opt.step_count = int(extra["opt_step"])
        start_epoch = int(extra["epoch"])
        if extra["total_steps"] != total_steps:
            raise ValueError("resume with a different schedule length")
    else:
        model = CardiacSegmenter(config.model_config())
        opt = AdamW(build_groups(model, config.lr_decoder, config.lr_backbone,
                                 config.weight_decay))

    encoder_checksum = model.encoder.checksum()
    log_lines: list[dict] = []
    with open(out / "train_log.ndjson", "a" if resume_from else "w") as log_file:
        for epoch in range(start_epoch, config.epochs):
            t0 = time.time()
            term_sums, n_batches = _run_epoch(model, opt, config, train_samples,
                                              epoch, total_steps, weights, adjacency, out)
            val_dice = (foreground_dice(model, val_samples, config.num_classes)
                        if val_samples else float("nan"))
            record = {
                "epoch": epoch,
                "val_dice": val_dice,
                "lr_factor": cosine_lr(min(opt.step_count, total_steps), total_steps,
                                       1.0, config.eta_min_frac),
                "encoder_frozen": model.encoder.checksum() == encoder_checksum,
            }
            for k, v in term_sums.items():
                record[f"loss_{k}"] = v / max(1, n_batches)
            log_lines.append(record)
            record_with_time = dict(record, seconds=round(time.time() - t0, 3))
            log_file.write(json.dumps(record_with_time) + "\n")
            log_file.flush()
            _save_checkpoint(out / f"epoch_{epoch + 1:03d}", model, opt, epoch + 1,
                             total_steps, config)
    _save_checkpoint(out / "last", model, opt, config.epochs, total_steps, config)
    return model, log_lines


def _train_on(config: RunConfig, train_samples: list[SegSample]) -> CardiacSegmenter:
    """Train on an explicit sample list (no splitting, no checkpoints)."""
    adjacency = _adjacency_for(config)
    weights = config.loss_weights()
    model = CardiacSegmenter(config.model_config())
    opt = AdamW(build_groups(model, config.lr_decoder, config.lr_backbone,
                             config.weight_decay))
    steps_per_epoch = math.ceil(len(train_samples) / config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)
    for epoch in range(config.epochs):
        _run_epoch(model, opt, config, train_samples, epoch, total_steps,
                   weights, adjacency)
    return model


def _dump_diagnostic(out: Path, batch: list[SegSample], breakdown: dict) -> None:
    diag = out / "diagnostic"
    diag.mkdir(exist_ok=True)
    np.savez(diag / "last_batch.npz",
             images=np.stack([s.image for s in batch]),
             masks=np.stack([s.mask for s in batch]))
    (diag / "breakdown.json").write_text(json.dumps(breakdown))


# -- evaluation -------------------------------------------------------------------


def _case_metrics(model: CardiacSegmenter, case_samples: list[SegSample],
                  num_classes: int, spacing_mm: float) -> dict:
    x, masks = _stack_batch(case_samples)
    pred = model.predict(x)
    counts = confusion(pred, masks, num_classes)
    dice_c, iou_c, dice_fg, iou_fg = dice_iou(counts)
    stats = pixel_stats(counts)
    hd_per_class = [
        float(np.mean([hd95(pred[i] == c, masks[i] == c, spacing_mm)
                       for i in range(len(case_samples))]))
        for c in range(1, num_classes)
    ]
    row = {
        "case": case_samples[0].patient_id,
        "dice": dice_fg,
        "iou": iou_fg,
        "hd95": float(np.mean(hd_per_class)),
        "accuracy": float((pred == masks).mean()),
        "sensitivity": float(np.nanmean(stats["sensitivity"][1:])),
        "specificity": float(np.nanmean(stats["specificity"][1:])),
        "precision": float(np.nanmean(stats["precision"][1:])),
        "recall": float(np.nanmean(stats["recall"][1:])),
    }
    for c in range(num_classes):
        row[f"dice_c{c}"] = float(dice_c[c])
        row[f"iou_c{c}"] = float(iou_c[c])
    # clinical numbers need both phases
    ed = [i for i, s in enumerate(case_samples) if s.phase == "ED"]
    es = [i for i, s in enumerate(case_samples) if s.phase == "ES"]
    if ed and es:
        voxel_mm3 = spacing_mm**3
        try:
            row["ef_error"] = ef_error([pred[i] for i in ed], [pred[i] for i in es],
                                       [masks[i] for i in ed], [masks[i] for i in es],
                                       voxel_mm3)
        except ValueError:  # no predicted cavity in a phase
            row["ef_error"] = float("nan")
        lv_pred = sum(int((pred[i] == 3).sum()) for i in ed)
        lv_gt = sum(int((masks[i] == 3).sum()) for i in ed)
        row["edv_error_ml"] = abs(lv_pred - lv_gt) * voxel_mm3 / 1000.0
    return row


def evaluate(model: CardiacSegmenter, samples: list[SegSample], num_classes: int,
             spacing_mm: float = 1.0, ci_seed: int = 0) -> MetricReport:
    """Patient-level metric report; cases evaluated in deterministic order."""
    if not samples:
        raise ValueError("nothing to evaluate")
    by_patient: dict[str, list[SegSample]] = {}
    for s in samples:
        by_patient.setdefault(s.patient_id, []).append(s)
    patients = sorted(by_patient)
    with ThreadPoolExecutor(max_workers=worker_threads()) as pool:
        rows = list(pool.map(
            lambda pid: _case_metrics(model, by_patient[pid], num_classes, spacing_mm),
            patients))
    return aggregate_report(rows, num_classes, ci_seed=ci_seed)


def evaluate_checkpoint(ckpt_dir, samples: list[SegSample],
                        spacing_mm: float = 1.0) -> MetricReport:
    model, _, _ = load_checkpoint(ckpt_dir)
    num_classes = model.config.decoder.num_classes
    labels = max(int(s.mask.max()) for s in samples) + 1
    if labels > num_classes:
        raise ValueError(f"data has {labels} classes but checkpoint expects {num_classes}")
    return evaluate(model, samples, num_classes, spacing_mm)


# -- ablation ---------------------------------------------------------------------


TABLE5_ROWS = [
    ("SAM Encoder + Basic Decoder",
     dict(use_csam=False, multi_scale=False, use_brm=False, loss_preset="dice_ce")),
    ("+ Multi-Scale Fusion",
     dict(use_csam=False, multi_scale=True, use_brm=False, loss_preset="dice_ce")),
    ("+ Cardiac-Specific Attention (CSAM)",
     dict(use_csam=True, multi_scale=True, use_brm=False, loss_preset="dice_ce")),
    ("+ Boundary Refinement (BRM)",
     dict(use_csam=True, multi_scale=True, use_brm=True, loss_preset="dice_ce")),
    ("+ Composite Loss (Full Pipeline)",
     dict(use_csam=True, multi_scale=True, use_brm=True, loss_preset="hybrid")),
]

TABLE6_ROWS = [
    ("L_Dice Only", "dice_only"),
    ("L_Boundary Only", "boundary_only"),
    ("L_Focal Only", "focal_only"),
    ("L_Dice + L_Focal", "dice_focal"),
    ("L_Dice + L_Boundary", "dice_boundary"),
    ("L_Hybrid (Ours)", "hybrid"),
]


def _ablation_row(config: RunConfig, samples: list[SegSample]) -> dict:
    train_samples, val_samples, _ = split_dataset(samples, config)
    model = _train_on(config, train_samples)
    report = evaluate(model, val_samples, config.num_classes, config.spacing_mm)
    return {
        "dice": report.mean["dice"],
        "iou": report.mean["iou"],
        "hd95": report.mean["hd95"],
        "ef_error": report.mean.get("ef_error", float("nan")),
        "precision": report.mean["precision"],
    }


def ablate(base_config: RunConfig, samples: list[SegSample], out_dir) -> tuple[list[dict], list[dict]]:
    """Architectural and loss ablations with a shared seed, in paper row order."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table5 = []
    for label, switches in TABLE5_ROWS:
        row = {"configuration": label}
        row.update(_ablation_row(replace(base_config, **switches), samples))
        table5.append(row)
    table6 = []
    for label, preset in TABLE6_ROWS:
        cfg = replace(base_config, use_csam=True, multi_scale=True, use_brm=True,
                      loss_preset=preset)
        row = {"configuration": label}
        row.update(_ablation_row(cfg, samples))
        table6.append(row)
    (out / "table5.json").write_text(json.dumps(table5, indent=1))
    (out / "table6.json").write_text(json.dumps(table6, indent=1))
    return table5, table6


# -- cross-validation --------------------------------------------------------------


def cross_validate(config: RunConfig, samples: list[SegSample], out_dir,
                   k: int = 5, repeats: int = 5) -> dict:
    """repeats x k-fold patient-level CV; per-fold reports persisted."""
    patients = sorted({s.patient_id for s in samples})
    if k > len(patients):
        raise ValueError(f"k={k} exceeds patient count {len(patients)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    matrix = []
    for rep in range(repeats):
        folds = kfold_patients(patients, k, seed=config.seed + rep)
        for fi, fold in enumerate(folds):
            fold_train = samples_for(samples, [p for p in patients if p not in fold])
            fold_val = samples_for(samples, fold)
            model = _train_on(config, fold_train)
            report = evaluate(model, fold_val, config.num_classes, config.spacing_mm,
                              ci_seed=config.seed)
            (out / f"rep{rep}_fold{fi}_report.json").write_text(report.to_json())
            matrix.append({"repeat": rep, "fold": fi, "dice": report.mean["dice"],
                           "iou": report.mean["iou"], "hd95": report.mean["hd95"]})
    summary = {}
    for key in ("dice", "iou", "hd95"):
        vals = np.array([r[key] for r in matrix])
        summary[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    result = {"folds": matrix, "summary": summary, "k": k, "repeats": repeats}
    (out / "cv_summary.json").write_text(json.dumps(result, indent=1))
    return result


# -- hyperparameter tuning -----------------------------------------------------------


def default_search_space():
    from .pso import Dimension, SearchSpace

    return SearchSpace([
        Dimension("alpha", 0.05, 1.0),
        Dimension("beta", 0.0, 1.0),
        Dimension("gamma", 0.0, 1.0),
        Dimension("lam", 0.0, 0.5),
        Dimension("theta", 1.0, 10.0),
        Dimension("lr_decoder", 1e-4, 1e-2, scale="log"),
    ])


def tune(base_config: RunConfig, samples: list[SegSample], out_dir,
         n_particles: int = 5, n_iters: int = 5, space=None,
         eval_epochs: int = 3) -> tuple[RunConfig, float]:
    """PSO over loss weights/theta/lr; objective = -validation foreground Dice.

    The base configuration is injected as particle 0, so the tuned result
    never scores worse than the incumbent on the tuning objective.
    """
    from .pso import optimize, write_leaderboard

    space = space or default_search_space()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_samples, val_samples, _ = split_dataset(samples, base_config)

    def objective(pos: dict) -> float:
        cfg = replace(base_config, loss_preset="custom", epochs=eval_epochs,
                      **{k: float(v) for k, v in pos.items()})
        try:
            model = _train_on(cfg, train_samples)
            return -foreground_dice(model, val_samples, cfg.num_classes)
        except TrainingDiverged:
            return float("inf")

    incumbent = {d.name: float(getattr(base_config, d.name)) for d in space.dims}
    trace: list[dict] = []
    best_pos, best_val, history = optimize(space, objective, n_particles, n_iters,
                                           seed=base_config.seed, inject=incumbent,
                                           trace=trace)
    write_leaderboard(out / "leaderboard.csv", trace, space.names)
    best_config = replace(base_config, loss_preset="custom",
                          **{k: float(v) for k, v in best_pos.items()})
    write_config_file(out / "best_config.cfg", best_config)
    (out / "history.json").write_text(json.dumps(history))
    return best_config, -best_val
