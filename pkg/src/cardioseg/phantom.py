"""Synthetic short-axis cardiac phantoms with guaranteed nesting topology.

Each patient gets an end-diastolic and an end-systolic slice stack. The
left-ventricular cavity sits strictly inside a myocardial ring with a
right-ventricular crescent hugging it, so "no LV pixel touches background"
holds by construction — the same predicate the structural loss penalizes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy import ndimage

from .losses import class_boundary
from .tensor_io import load_tns, save_tns

BG, RV, MYO, LV = 0, 1, 2, 3


@dataclass
class PhantomConfig:
    size: int = 64
    slices: int = 3                      # per phase
    lv_radius: tuple[float, float] = (7.0, 11.0)
    myo_thickness: tuple[float, float] = (3.5, 5.5)
    rv_radius_factor: tuple[float, float] = (1.05, 1.25)   # relative to epicardium
    rv_gap: float = 0.0                  # extra clearance beyond the epicardium
    systolic_factor: tuple[float, float] = (0.65, 0.8)
    slice_taper: float = 0.12            # radius shrink from base to apex
    center_jitter: float = 2.0           # px around image center
    intensity: dict = field(default_factory=lambda: {BG: 0.15, RV: 0.55, MYO: 0.35, LV: 0.85})
    noise_std: float = 0.04
    margin: float = 2.0

    def __post_init__(self):
        if self.myo_thickness[0] < 2.0:
            raise ValueError("myocardium thickness must be at least 2 px")
        epi_max = self.lv_radius[1] + self.myo_thickness[1]
        # the RV disk is offset from center by the wall thickness
        extent = max(epi_max, epi_max * self.rv_radius_factor[1] + self.myo_thickness[1])
        if extent + self.center_jitter + self.margin > self.size / 2:
            raise ValueError("structures do not fit inside the image with a margin")

    @classmethod
    def for_size(cls, size: int, slices: int = 3) -> "PhantomConfig":
        """Defaults geometrically rescaled from the 64 px baseline."""
        f = size / 64.0
        return cls(size=size, slices=slices,
                   lv_radius=(7.0 * f, 11.0 * f),
                   myo_thickness=(max(2.0, 3.5 * f), max(2.5, 5.5 * f)),
                   center_jitter=2.0 * f, margin=2.0 * f)


@dataclass
class SegSample:
    image: np.ndarray      # float64 [1,H,W], z-scored
    mask: np.ndarray       # int64 [H,W], labels {0..3}
    patient_id: str
    phase: str             # "ED" or "ES"
    slice_index: int = 0


def zscore(image: np.ndarray) -> np.ndarray:
    std = image.std()
    if std == 0:
        return image - image.mean()
    return (image - image.mean()) / std


def _disk(size: int, cy: float, cx: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2


def _render_slice(cfg: PhantomConfig, rng: np.random.Generator, cy: float, cx: float,
                  r_lv: float, thickness: float, r_rv: float) -> tuple[np.ndarray, np.ndarray]:
    size = cfg.size
    lv = _disk(size, cy, cx, r_lv)
    epi = _disk(size, cy, cx, r_lv + thickness)
    # crescent: a larger disk shifted toward the right ventricle side, clear of
    # the epicardium by rv_gap so it wraps around the ring without touching LV
    rv_outer = _disk(size, cy, cx - thickness, r_rv)
    rv = rv_outer & ~_disk(size, cy, cx, r_lv + thickness + cfg.rv_gap)

    mask = np.zeros((size, size), dtype=np.int64)
    mask[rv] = RV
    mask[epi] = MYO
    mask[lv] = LV

    image = np.full((size, size), cfg.intensity[BG])
    for cls in (RV, MYO, LV):
        image[mask == cls] = cfg.intensity[cls]
    image = image + rng.normal(0.0, cfg.noise_std, size=(size, size))
    return zscore(image)[None], mask


def check_topology(mask: np.ndarray) -> bool:
    """True iff no LV pixel is 4-adjacent to background."""
    lv = mask == LV
    if not lv.any():
        return True
    grown = ndimage.binary_dilation(lv, structure=np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]]))
    return not np.any((mask == BG) & grown)


def generate_patient(seed: int, config: PhantomConfig, patient_id: str | None = None) -> list[SegSample]:
    """Deterministic ED+ES stacks; ES is the ED geometry scaled systolically."""
    rng = np.random.default_rng(seed)
    pid = patient_id or f"patient_{seed:04d}"
    half = config.size / 2.0
    cy = half + rng.uniform(-config.center_jitter, config.center_jitter)
    cx = half + rng.uniform(-config.center_jitter, config.center_jitter)
    r_lv = rng.uniform(*config.lv_radius)
    thickness = rng.uniform(*config.myo_thickness)
    r_rv = (r_lv + thickness) * rng.uniform(*config.rv_radius_factor)
    sys_factor = rng.uniform(*config.systolic_factor)

    samples = []
    for phase, factor in (("ED", 1.0), ("ES", sys_factor)):
        for s in range(config.slices):
            taper = 1.0 - config.slice_taper * s / max(1, config.slices - 1)
            image, mask = _render_slice(config, rng, cy, cx,
                                        r_lv * factor * taper, thickness,
                                        r_rv * factor * taper)
            samples.append(SegSample(image, mask, pid, phase, s))
    for s in samples:
        if not check_topology(s.mask):
            raise AssertionError("generated mask violates the nesting topology")
    return samples


def generate_dataset(n_patients: int, config: PhantomConfig, seed: int = 0) -> list[SegSample]:
    samples = []
    ss = np.random.SeedSequence(seed)
    child_seeds = ss.generate_state(n_patients)
    for i in range(n_patients):
        samples.extend(generate_patient(int(child_seeds[i]), config, f"patient_{i:04d}"))
    return samples


def save_dataset(dirpath, samples: list[SegSample], config: PhantomConfig, seed: int) -> None:
    """dataset/<patient>/<phase>_<slice>.tns (+ _mask.tns) plus meta.json."""
    root = Path(dirpath)
    root.mkdir(parents=True, exist_ok=True)
    patients = sorted({s.patient_id for s in samples})
    for s in samples:
        pdir = root / s.patient_id
        pdir.mkdir(exist_ok=True)
        save_tns(pdir / f"{s.phase}_{s.slice_index}.tns", s.image)
        save_tns(pdir / f"{s.phase}_{s.slice_index}_mask.tns", s.mask.astype(np.float64))
    meta = {"patients": patients, "seed": seed, "config": asdict(config)}
    (root / "meta.json").write_text(json.dumps(meta, indent=1))


def load_dataset(dirpath) -> tuple[list[SegSample], dict]:
    root = Path(dirpath)
    meta = json.loads((root / "meta.json").read_text())
    samples = []
    for pid in meta["patients"]:
        pdir = root / pid
        for img_path in sorted(pdir.glob("*.tns")):
            if img_path.stem.endswith("_mask"):
                continue
            phase, idx = img_path.stem.split("_")
            mask = load_tns(pdir / f"{img_path.stem}_mask.tns").astype(np.int64)
            samples.append(SegSample(load_tns(img_path), mask, pid, phase, int(idx)))
    return samples, meta


# -- augmentation ---------------------------------------------------------------


def augment(sample: SegSample, rng: np.random.Generator,
            rotate_deg: float = 15.0, scale_range: tuple[float, float] = (0.9, 1.1),
            elastic_alpha: float = 2.0, elastic_sigma: float = 8.0) -> SegSample:
    """Rotation/scale/elastic warp; image bilinear, mask nearest, same transform."""
    angle = rng.uniform(-rotate_deg, rotate_deg)
    scale = rng.uniform(*scale_range)
    if angle == 0.0 and scale == 1.0 and elastic_alpha == 0.0:
        return sample

    h, w = sample.mask.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rad = np.deg2rad(angle)
    cos_a, sin_a = np.cos(rad), np.sin(rad)
    # inverse map: output pixel -> source coordinate
    yr = (yy - cy) / scale
    xr = (xx - cx) / scale
    src_y = cos_a * yr + sin_a * xr + cy
    src_x = -sin_a * yr + cos_a * xr + cx
    if elastic_alpha > 0.0:
        dy = ndimage.gaussian_filter(rng.uniform(-1, 1, size=(h, w)), elastic_sigma) * elastic_alpha
        dx = ndimage.gaussian_filter(rng.uniform(-1, 1, size=(h, w)), elastic_sigma) * elastic_alpha
        src_y = src_y + dy
        src_x = src_x + dx
    coords = np.stack([src_y, src_x])
    image = ndimage.map_coordinates(sample.image[0], coords, order=1, mode="nearest")[None]
    mask = ndimage.map_coordinates(sample.mask, coords, order=0, mode="nearest")
    return SegSample(zscore(image), mask.astype(np.int64), sample.patient_id,
                     sample.phase, sample.slice_index)


# -- patient-level splitting ------------------------------------------------------


def split_patients(patients: list[str], fractions: tuple[float, float, float],
                   seed: int = 0) -> tuple[list[str], list[str], list[str]]:
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    n = len(patients)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"too few patients ({n}) for fractions {fractions}")
    order = list(np.random.default_rng(seed).permutation(sorted(patients)))
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


def kfold_patients(patients: list[str], k: int, seed: int = 0) -> list[list[str]]:
    """k disjoint validation folds covering every patient exactly once."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > len(patients):
        raise ValueError(f"k={k} exceeds patient count {len(patients)}")
    order = np.random.default_rng(seed).permutation(sorted(patients))
    return [list(fold) for fold in np.array_split(order, k)]


def samples_for(samples: list[SegSample], patients: list[str]) -> list[SegSample]:
    wanted = set(patients)
    return [s for s in samples if s.patient_id in wanted]
