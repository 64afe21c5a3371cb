import numpy as np
import pytest

from cardioseg.metrics import (ConfusionCounts, aggregate_report, boundary_pixels,
                               bootstrap_ci, cavity_volume_ml, confusion, dice_iou,
                               ef_error, ejection_fraction, hd95, pixel_stats)


def brute_force_hd95(pred_c, gt_c, spacing=1.0):
    """Exhaustive pairwise-distance oracle (loops, no cdist)."""
    bp = boundary_pixels(pred_c)
    bg = boundary_pixels(gt_c)
    dists = []
    for a in bp:
        dists.append(min(np.sqrt(((a - b) ** 2).sum()) for b in bg))
    for b in bg:
        dists.append(min(np.sqrt(((b - a) ** 2).sum()) for a in bp))
    return float(np.percentile(np.array(dists), 95, method="linear") * spacing)


class TestConfusion:
    def test_perfect_prediction(self):
        rng = np.random.default_rng(0)
        mask = rng.integers(0, 4, size=(8, 8))
        c = confusion(mask, mask, 4)
        assert np.all(c.fp == 0) and np.all(c.fn == 0)

    def test_complement_masks(self):
        a = np.zeros((4, 4), dtype=int)
        a[:2] = 1
        b = 1 - a
        c = confusion(a, b, 2)
        assert np.all(c.tp == 0) and np.all(c.tn == 0)

    def test_matches_pixel_loop(self):
        rng = np.random.default_rng(1)
        pred = rng.integers(0, 3, size=(8, 8))
        gt = rng.integers(0, 3, size=(8, 8))
        c = confusion(pred, gt, 3)
        for cls in range(3):
            tp = fp = fn = tn = 0
            for i in range(8):
                for j in range(8):
                    p, g = pred[i, j] == cls, gt[i, j] == cls
                    tp += p and g
                    fp += p and not g
                    fn += g and not p
                    tn += not p and not g
            assert (c.tp[cls], c.fp[cls], c.fn[cls], c.tn[cls]) == (tp, fp, fn, tn)

    def test_out_of_range_labels(self):
        with pytest.raises(ValueError):
            confusion(np.array([[5]]), np.array([[0]]), 4)

    def test_counts_invariant(self):
        with pytest.raises(ValueError):
            ConfusionCounts(np.array([1, 2]), np.array([0, 0]), np.array([0, 0]), np.array([3, 3]))


class TestDiceIou:
    def test_identical_masks(self):
        mask = np.random.default_rng(2).integers(0, 4, size=(8, 8))
        dice, iou, mdice, miou = dice_iou(confusion(mask, mask, 4))
        np.testing.assert_allclose(dice, 1.0)
        np.testing.assert_allclose(iou, 1.0)
        assert mdice == miou == 1.0

    def test_paper_pair_relation(self):
        # reported pair (93.39, 87.61): iou = dice/(2-dice) must hold within
        # the rounding of both 4-digit values (interval overlap)
        lo = 0.93385 / (2.0 - 0.93385)
        hi = 0.93395 / (2.0 - 0.93395)
        assert lo <= 0.87615 and hi >= 0.87605
        assert abs(0.9339 / (2.0 - 0.9339) - 0.8761) < 1.5e-4

    def test_half_overlap_hand_counts(self):
        pred = np.array([[1, 1, 0, 0]])
        gt = np.array([[0, 1, 1, 0]])
        dice, iou, _, _ = dice_iou(confusion(pred, gt, 2))
        assert dice[1] == 0.5
        assert abs(iou[1] - 1.0 / 3.0) < 1e-15

    def test_iou_dice_relation_random(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            pred = rng.integers(0, 4, size=(12, 12))
            gt = rng.integers(0, 4, size=(12, 12))
            dice, iou, _, _ = dice_iou(confusion(pred, gt, 4))
            np.testing.assert_allclose(iou, dice / (2.0 - dice), atol=1e-9)

    def test_empty_class_conventions(self):
        pred = np.zeros((4, 4), dtype=int)
        gt = np.zeros((4, 4), dtype=int)
        dice, iou, _, _ = dice_iou(confusion(pred, gt, 3))
        assert dice[1] == 1.0 and iou[2] == 1.0  # absent everywhere
        gt2 = gt.copy()
        gt2[0, 0] = 1
        dice, iou, _, _ = dice_iou(confusion(pred, gt2, 3))
        assert dice[1] == 0.0 and iou[1] == 0.0  # absent in pred only


class TestHd95:
    def test_identical_masks_zero(self):
        m = np.zeros((8, 8), dtype=bool)
        m[2:6, 2:6] = True
        assert hd95(m, m) == 0.0

    def test_shifted_square_matches_bruteforce(self):
        a = np.zeros((10, 10), dtype=bool)
        a[2:6, 2:6] = True
        b = np.zeros((10, 10), dtype=bool)
        b[3:7, 2:6] = True  # shifted by 1 px
        expected = brute_force_hd95(a, b)
        assert hd95(a, b) == expected

    def test_spacing_linearity(self):
        a = np.zeros((10, 10), dtype=bool)
        a[2:6, 2:6] = True
        b = np.zeros((10, 10), dtype=bool)
        b[4:8, 4:8] = True
        assert hd95(a, b, spacing_mm=2.0) == 2.0 * hd95(a, b, spacing_mm=1.0)

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        a = rng.random((12, 12)) > 0.6
        b = rng.random((12, 12)) > 0.6
        if a.any() and b.any():
            assert hd95(a, b) == hd95(b, a)

    def test_empty_conventions(self):
        empty = np.zeros((6, 8), dtype=bool)
        full = np.zeros((6, 8), dtype=bool)
        full[2, 3] = True
        assert hd95(empty, empty) == 0.0
        assert hd95(empty, full) == np.hypot(5, 7)

    def test_random_masks_match_bruteforce(self):
        rng = np.random.default_rng(5)
        for _ in range(25):
            a = rng.random((9, 9)) > 0.5
            b = rng.random((9, 9)) > 0.5
            if not (a.any() and b.any()):
                continue
            assert hd95(a, b) == brute_force_hd95(a, b)


class TestPixelStats:
    def test_perfect(self):
        mask = np.random.default_rng(6).integers(0, 3, size=(6, 6))
        stats = pixel_stats(confusion(mask, mask, 3))
        for key in ("accuracy", "sensitivity", "specificity", "precision", "recall"):
            present = np.unique(mask)
            np.testing.assert_allclose(stats[key][present], 1.0)

    def test_all_background_prediction(self):
        gt = np.zeros((4, 4), dtype=int)
        gt[:2] = 1
        pred = np.zeros((4, 4), dtype=int)
        stats = pixel_stats(confusion(pred, gt, 2))
        assert stats["sensitivity"][1] == 0.0
        assert stats["specificity"][1] == 1.0

    def test_fixture_counts(self):
        c = ConfusionCounts(np.array([8]), np.array([2]), np.array([2]), np.array([88]))
        stats = pixel_stats(c)
        assert stats["precision"][0] == 0.8
        assert stats["recall"][0] == 0.8
        assert stats["accuracy"][0] == 0.96

    def test_undefined_marker(self):
        c = ConfusionCounts(np.array([0]), np.array([0]), np.array([0]), np.array([10]))
        stats = pixel_stats(c)
        assert np.isnan(stats["precision"][0])
        assert np.isnan(stats["sensitivity"][0])


class TestClinical:
    def test_ef_formula(self):
        assert ejection_fraction(120.0, 60.0) == 50.0

    def test_zero_edv_rejected(self):
        with pytest.raises(ValueError):
            ejection_fraction(0.0, 0.0)

    def test_identical_masks_zero_error(self):
        rng = np.random.default_rng(7)
        ed = [rng.integers(0, 4, size=(8, 8)) for _ in range(3)]
        es = [rng.integers(0, 4, size=(8, 8)) for _ in range(3)]
        if not any((m == 3).any() for m in ed):
            ed[0][0, 0] = 3
        assert ef_error(ed, es, ed, es, 1.0) == 0.0

    def test_volume_counting_oracle(self):
        masks = [np.full((10, 10), 3, dtype=int), np.zeros((10, 10), dtype=int)]
        # 100 LV voxels at 1 mm^3 each -> 0.1 ml
        assert cavity_volume_ml(masks, 1.0) == 0.1
        # 1100 vs 1000 voxels -> 0.1 ml difference
        a = [np.full((110, 10), 3, dtype=int)]
        b = [np.full((100, 10), 3, dtype=int)]
        assert abs(cavity_volume_ml(a, 1.0) - cavity_volume_ml(b, 1.0) - 0.1) < 1e-12


class TestBootstrap:
    def test_identical_values(self):
        lo, hi = bootstrap_ci([3.0] * 10)
        assert lo == hi == 3.0

    def test_bounds_within_sample_range(self):
        rng = np.random.default_rng(8)
        vals = rng.random(20).tolist()
        lo, hi = bootstrap_ci(vals, seed=1)
        assert min(vals) <= lo <= hi <= max(vals)

    def test_seeded_rerun_matches_reference_trace(self):
        vals = np.arange(10, dtype=float)
        lo, hi = bootstrap_ci(vals, n_resamples=500, level=0.95, seed=42)
        # independent re-implementation of the seeded resampling trace
        rng = np.random.default_rng(42)
        means = rng.choice(vals, size=(500, 10), replace=True).mean(axis=1)
        ref_lo, ref_hi = np.percentile(means, [2.5, 97.5], method="linear")
        assert (lo, hi) == (float(ref_lo), float(ref_hi))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            bootstrap_ci([])


def test_aggregate_report_roundtrip(tmp_path):
    rows = [
        {"case": "p0", "dice": 0.9, "iou": 0.82, "hd95": 1.0, "accuracy": 0.99,
         "dice_c0": 0.99, "dice_c1": 0.9, "iou_c0": 0.98, "iou_c1": 0.82},
        {"case": "p1", "dice": 0.8, "iou": 0.70, "hd95": 2.0, "accuracy": 0.98,
         "dice_c0": 0.98, "dice_c1": 0.8, "iou_c0": 0.97, "iou_c1": 0.70},
    ]
    rep = aggregate_report(rows, num_classes=2, ci_seed=0)
    assert abs(rep.mean["dice"] - 0.85) < 1e-12
    assert "dice" in rep.ci
    text = rep.summary_table()
    for row in ("Dice Coefficient", "Hausdorff Distance", "Specificity"):
        assert row in text
    rep.write_case_csv(tmp_path / "cases.csv")
    import csv as _csv

    with open(tmp_path / "cases.csv") as f:
        parsed = list(_csv.DictReader(f))
    assert len(parsed) == 2 and parsed[0]["case"] == "p0"
    json_blob = rep.to_json()
    assert '"dice"' in json_blob
