import numpy as np
import pytest

from cardioseg.losses import class_boundary, distance_transform
from cardioseg.phantom import (BG, LV, MYO, RV, PhantomConfig, augment, check_topology,
                               generate_dataset, generate_patient, kfold_patients,
                               load_dataset, samples_for, save_dataset, split_patients,
                               zscore)


CFG = PhantomConfig()


class TestGeneratePatient:
    def test_deterministic(self):
        a = generate_patient(7, CFG)
        b = generate_patient(7, CFG)
        for s1, s2 in zip(a, b):
            assert np.array_equal(s1.image, s2.image)
            assert np.array_equal(s1.mask, s2.mask)

    def test_phases_and_slices(self):
        samples = generate_patient(1, CFG)
        assert len(samples) == 2 * CFG.slices
        assert {s.phase for s in samples} == {"ED", "ES"}

    def test_topology_invariant(self):
        for seed in range(8):
            for s in generate_patient(seed, CFG):
                assert check_topology(s.mask)
                assert set(np.unique(s.mask)) <= {BG, RV, MYO, LV}

    def test_es_smaller_than_ed(self):
        samples = generate_patient(3, CFG)
        ed_lv = sum((s.mask == LV).sum() for s in samples if s.phase == "ED")
        es_lv = sum((s.mask == LV).sum() for s in samples if s.phase == "ES")
        assert es_lv < ed_lv

    def test_zscore_normalization(self):
        for s in generate_patient(5, CFG):
            assert abs(s.image.mean()) < 1e-6
            assert abs(s.image.std() - 1.0) < 1e-6

    def test_infeasible_config_rejected(self):
        with pytest.raises(ValueError):
            PhantomConfig(size=32, lv_radius=(12.0, 16.0))
        with pytest.raises(ValueError):
            PhantomConfig(myo_thickness=(1.0, 3.0))


class TestTopologyPredicate:
    def test_violating_mask_detected(self):
        mask = np.zeros((8, 8), dtype=np.int64)
        mask[4, 4] = LV  # LV pixel surrounded by background
        assert not check_topology(mask)

    def test_diagonal_contact_allowed(self):
        # 4-connectivity: diagonal BG contact does not violate
        mask = np.full((4, 4), MYO, dtype=np.int64)
        mask[0, 0] = BG
        mask[1, 1] = LV
        mask[2, 1] = MYO
        mask[1, 2] = MYO
        assert check_topology(mask)


class TestAugment:
    def _sample(self, seed=0):
        return generate_patient(seed, CFG)[0]

    def test_zero_magnitude_identity(self):
        s = self._sample()
        out = augment(s, np.random.default_rng(0), rotate_deg=0.0,
                      scale_range=(1.0, 1.0), elastic_alpha=0.0)
        assert np.array_equal(out.image, s.image)
        assert np.array_equal(out.mask, s.mask)

    def test_labels_stay_valid(self):
        s = self._sample(1)
        rng = np.random.default_rng(1)
        for _ in range(5):
            out = augment(s, rng)
            assert set(np.unique(out.mask)) <= {BG, RV, MYO, LV}

    def test_rotation_round_trip_boundary_band(self):
        s = self._sample(2)

        class FixedAngle:
            """Feeds +theta then -theta into the two augment calls."""

            def __init__(self, angles):
                self.angles = list(angles)

            def uniform(self, lo, hi, size=None):
                if size is None:
                    return self.angles.pop(0) if self.angles else 1.0
                return np.zeros(size)

        theta = 9.0
        fwd = augment(s, FixedAngle([theta, 1.0]), elastic_alpha=0.0)
        back = augment(fwd, FixedAngle([-theta, 1.0]), elastic_alpha=0.0)
        diff = back.mask != s.mask
        if diff.any():
            # disagreements must hug a class boundary (<= 2 px)
            boundary = np.zeros_like(s.mask, dtype=bool)
            for c in (BG, RV, MYO, LV):
                boundary |= class_boundary(s.mask, c)
            from scipy import ndimage

            dist = ndimage.distance_transform_edt(~boundary)
            assert dist[diff].max() <= 2.0


class TestSplits:
    def test_80_10_10(self):
        patients = [f"p{i}" for i in range(10)]
        tr, va, te = split_patients(patients, (0.8, 0.1, 0.1), seed=0)
        assert (len(tr), len(va), len(te)) == (8, 1, 1)

    def test_disjoint(self):
        patients = [f"p{i}" for i in range(20)]
        tr, va, te = split_patients(patients, (0.8, 0.1, 0.1), seed=3)
        assert not (set(tr) & set(va)) and not (set(tr) & set(te)) and not (set(va) & set(te))
        assert set(tr) | set(va) | set(te) == set(patients)

    def test_bad_fractions(self):
        with pytest.raises(ValueError):
            split_patients(["a", "b"], (0.5, 0.2, 0.2))
        with pytest.raises(ValueError):
            split_patients(["a", "b"], (0.8, 0.1, 0.1))

    def test_kfold_partition(self):
        patients = [f"p{i}" for i in range(11)]
        folds = kfold_patients(patients, 5, seed=1)
        assert len(folds) == 5
        seen = [p for fold in folds for p in fold]
        assert sorted(seen) == sorted(patients)  # each patient in exactly one fold

    def test_kfold_validation(self):
        with pytest.raises(ValueError):
            kfold_patients(["a", "b"], 1)
        with pytest.raises(ValueError):
            kfold_patients(["a", "b"], 3)

    def test_deterministic_per_seed(self):
        patients = [f"p{i}" for i in range(10)]
        assert split_patients(patients, (0.8, 0.1, 0.1), 5) == split_patients(patients, (0.8, 0.1, 0.1), 5)


class TestDatasetIO:
    def test_save_load_round_trip(self, tmp_path):
        samples = generate_dataset(3, CFG, seed=11)
        save_dataset(tmp_path / "d", samples, CFG, seed=11)
        loaded, meta = load_dataset(tmp_path / "d")
        assert meta["seed"] == 11
        assert len(loaded) == len(samples)
        by_key = {(s.patient_id, s.phase, s.slice_index): s for s in loaded}
        for s in samples:
            match = by_key[(s.patient_id, s.phase, s.slice_index)]
            assert np.array_equal(match.image, s.image)
            assert np.array_equal(match.mask, s.mask)

    def test_samples_for_filters_patients(self):
        samples = generate_dataset(4, CFG, seed=2)
        subset = samples_for(samples, ["patient_0001", "patient_0003"])
        assert {s.patient_id for s in subset} == {"patient_0001", "patient_0003"}
