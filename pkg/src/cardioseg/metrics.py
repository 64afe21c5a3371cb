"""Segmentation and clinical metrics: overlap, boundary distance, volumes.

Conventions (pinned so every value is exactly testable):
  - boundary = 4-connectivity erosion difference of the binary class mask
  - percentiles use linear interpolation between order statistics
  - a class absent from both masks scores dice=iou=1 and hd95=0; absent
    from exactly one scores dice=iou=0 and hd95=image diagonal
  - undefined ratios (zero denominators) become NaN and are excluded
    from means
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    def __post_init__(self):
        total = self.tp + self.fp + self.fn + self.tn
        if np.any(total != total.reshape(-1)[0]):
            raise ValueError("per-class counts must each sum to the pixel count")


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> ConfusionCounts:
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError("masks must share a shape")
    for m in (pred, gt):
        if m.min() < 0 or m.max() >= num_classes:
            raise ValueError("labels outside [0, num_classes)")
    n = pred.size
    tp = np.zeros(num_classes, dtype=np.int64)
    fp = np.zeros(num_classes, dtype=np.int64)
    fn = np.zeros(num_classes, dtype=np.int64)
    for c in range(num_classes):
        pc, gc = pred == c, gt == c
        tp[c] = np.count_nonzero(pc & gc)
        fp[c] = np.count_nonzero(pc & ~gc)
        fn[c] = np.count_nonzero(~pc & gc)
    tn = n - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def dice_iou(counts: ConfusionCounts) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Per-class dice/iou plus foreground means; empty-class convention applied."""
    tp, fp, fn = counts.tp.astype(float), counts.fp.astype(float), counts.fn.astype(float)
    denom_d = 2 * tp + fp + fn
    denom_i = tp + fp + fn
    dice = np.where(denom_d > 0, 2 * tp / np.where(denom_d > 0, denom_d, 1), 1.0)
    iou = np.where(denom_i > 0, tp / np.where(denom_i > 0, denom_i, 1), 1.0)
    return dice, iou, float(dice[1:].mean()), float(iou[1:].mean())


def boundary_pixels(mask_c: np.ndarray) -> np.ndarray:
    """Foreground pixels with a 4-neighbor outside the class (erosion difference)."""
    m = np.asarray(mask_c, dtype=bool)
    if not m.any():
        return np.zeros((0, 2), dtype=np.int64)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~(m & interior))


def hd95(pred_c: np.ndarray, gt_c: np.ndarray, spacing_mm: float = 1.0) -> float:
    """Symmetric 95th-percentile boundary distance, in mm."""
    pred_c = np.asarray(pred_c, dtype=bool)
    gt_c = np.asarray(gt_c, dtype=bool)
    p_empty, g_empty = not pred_c.any(), not gt_c.any()
    if p_empty and g_empty:
        return 0.0
    if p_empty or g_empty:
        h, w = pred_c.shape
        return float(np.hypot(h - 1, w - 1) * spacing_mm)
    bp = boundary_pixels(pred_c).astype(np.float64)
    bg = boundary_pixels(gt_c).astype(np.float64)
    d = cdist(bp, bg)
    pooled = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return float(np.percentile(pooled, 95, method="linear") * spacing_mm)


def pixel_stats(counts: ConfusionCounts) -> dict[str, np.ndarray]:
    """accuracy/sensitivity/specificity/precision/recall per class; NaN if undefined."""
    tp, fp = counts.tp.astype(float), counts.fp.astype(float)
    fn, tn = counts.fn.astype(float), counts.tn.astype(float)

    def ratio(num, den):
        return np.where(den > 0, num / np.where(den > 0, den, 1), np.nan)

    sens = ratio(tp, tp + fn)
    return {
        "accuracy": ratio(tp + tn, tp + fp + fn + tn),
        "sensitivity": sens,
        "specificity": ratio(tn, tn + fp),
        "precision": ratio(tp, tp + fp),
        "recall": sens.copy(),
    }


def ejection_fraction(edv_ml: float, esv_ml: float) -> float:
    if edv_ml <= 0:
        raise ValueError("end-diastolic volume must be positive")
    return 100.0 * (edv_ml - esv_ml) / edv_ml


def cavity_volume_ml(masks, voxel_mm3: float, class_id: int = 3) -> float:
    """Slice-summed voxel count of one class, converted to milliliters."""
    voxels = sum(int(np.count_nonzero(np.asarray(m) == class_id)) for m in masks)
    return voxels * voxel_mm3 / 1000.0


def ef_error(pred_ed, pred_es, gt_ed, gt_es, voxel_mm3: float, class_id: int = 3) -> float:
    """Absolute EF difference (percent) between prediction and ground truth."""
    ef_pred = ejection_fraction(cavity_volume_ml(pred_ed, voxel_mm3, class_id),
                                cavity_volume_ml(pred_es, voxel_mm3, class_id))
    ef_gt = ejection_fraction(cavity_volume_ml(gt_ed, voxel_mm3, class_id),
                              cavity_volume_ml(gt_es, voxel_mm3, class_id))
    return abs(ef_pred - ef_gt)


def bootstrap_ci(values, n_resamples: int = 2000, level: float = 0.95,
                 seed: int = 0) -> tuple[float, float]:
    """Seeded percentile bootstrap over per-case values."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("bootstrap needs at least one value")
    rng = np.random.default_rng(seed)
    means = rng.choice(values, size=(n_resamples, values.size), replace=True).mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(means, [100 * alpha, 100 * (1 - alpha)], method="linear")
    return float(lo), float(hi)


TABLE_ROWS = ["Dice Coefficient", "Pixel Accuracy", "IoU (Jaccard)", "Hausdorff Distance",
              "Sensitivity", "Specificity", "Precision", "Recall"]


@dataclass
class MetricReport:
    num_classes: int
    per_class: dict[str, list[float]]
    mean: dict[str, float]
    ci: dict[str, tuple[float, float]] = field(default_factory=dict)
    per_case: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "num_classes": self.num_classes,
            "per_class": self.per_class,
            "mean": self.mean,
            "ci": {k: list(v) for k, v in self.ci.items()},
        }, indent=1)

    def summary_table(self) -> str:
        """Aligned text table with the standard eight metric rows."""
        key_by_row = {
            "Dice Coefficient": "dice", "Pixel Accuracy": "accuracy",
            "IoU (Jaccard)": "iou", "Hausdorff Distance": "hd95",
            "Sensitivity": "sensitivity", "Specificity": "specificity",
            "Precision": "precision", "Recall": "recall",
        }
        lines = [f"{'Metric':<22}{'Score':>12}  {'95% CI':>20}"]
        for row in TABLE_ROWS:
            key = key_by_row[row]
            val = self.mean.get(key, float("nan"))
            if key == "hd95":
                score = f"{val:.2f} mm"
            else:
                score = f"{100 * val:.2f}%"
            ci = self.ci.get(key)
            ci_s = f"[{ci[0]:.4f}, {ci[1]:.4f}]" if ci else "-"
            lines.append(f"{row:<22}{score:>12}  {ci_s:>20}")
        return "\n".join(lines)

    def write_case_csv(self, path) -> None:
        if not self.per_case:
            return
        keys = list(self.per_case[0])
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=keys)
            writer.writeheader()
            writer.writerows(self.per_case)


def aggregate_report(case_rows: list[dict], num_classes: int,
                     ci_seed: int = 0, with_ci: bool = True) -> MetricReport:
    """Combine per-case metric dicts (means over cases, CI over cases)."""
    scalar_keys = [k for k in case_rows[0] if isinstance(case_rows[0][k], float)]
    mean = {k: float(np.nanmean([r[k] for r in case_rows])) for k in scalar_keys}
    per_class: dict[str, list[float]] = {}
    for key in ("dice", "iou"):
        cols = [f"{key}_c{c}" for c in range(num_classes)]
        if all(col in case_rows[0] for col in cols):
            per_class[key] = [float(np.nanmean([r[col] for r in case_rows])) for col in cols]
    ci = {}
    if with_ci and len(case_rows) >= 2:
        for k in ("dice", "iou", "hd95", "accuracy"):
            if k in mean:
                ci[k] = bootstrap_ci([r[k] for r in case_rows], seed=ci_seed)
    return MetricReport(num_classes, per_class, mean, ci, case_rows)
