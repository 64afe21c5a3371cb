"""The composite segmentation objective and its four differentiable terms.

total = alpha*dice + beta*focal + gamma*boundary + lambda*struct, with the
paper-style coefficients (0.5, 0.3, 0.2, 0.1) and focal exponent 2.0 as
defaults. Each term is exposed on its own so the loss ablation presets can
recombine them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossWeights:
    alpha: float = 0.5       # dice
    beta: float = 0.3        # focal
    gamma: float = 0.2       # boundary
    lam: float = 0.1         # structural consistency
    gamma_f: float = 2.0     # focal modulating exponent
    theta: float = 5.0       # boundary decay, px
    eps: float = 1e-6        # dice smoothing
    alpha_c: tuple[float, ...] | None = None  # per-class focal weights

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.lam) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.eps <= 0 or self.theta <= 0:
            raise ValueError("eps and theta must be positive")


# presets for the loss-ablation switchboard (term weights only)
LOSS_PRESETS: dict[str, dict[str, float]] = {
    "dice_only": {"alpha": 1.0, "beta": 0.0, "gamma": 0.0, "lam": 0.0},
    "boundary_only": {"alpha": 0.0, "beta": 0.0, "gamma": 1.0, "lam": 0.0},
    "focal_only": {"alpha": 0.0, "beta": 1.0, "gamma": 0.0, "lam": 0.0},
    "dice_focal": {"alpha": 0.5, "beta": 0.5, "gamma": 0.0, "lam": 0.0},
    "dice_boundary": {"alpha": 0.5, "beta": 0.0, "gamma": 0.5, "lam": 0.0},
    "hybrid": {"alpha": 0.5, "beta": 0.3, "gamma": 0.2, "lam": 0.1},
    # dice + plain cross-entropy (focal with exponent 0) for the basic baseline
    "dice_ce": {"alpha": 0.5, "beta": 0.5, "gamma": 0.0, "lam": 0.0, "gamma_f": 0.0},
}


def make_loss_weights(preset: str, **overrides) -> LossWeights:
    if preset not in LOSS_PRESETS:
        raise ValueError(f"unknown loss preset {preset!r}; choose from {sorted(LOSS_PRESETS)}")
    kw = dict(LOSS_PRESETS[preset])
    kw.update(overrides)
    return LossWeights(**kw)


def default_adjacency(num_classes: int = 4, lv: int = 3, bg: int = 0) -> np.ndarray:
    """Only the LV/background contact is invalid: myocardium must separate them."""
    a = np.zeros((num_classes, num_classes))
    a[lv, bg] = a[bg, lv] = 1.0
    return a


def load_adjacency(path) -> np.ndarray:
    a = np.asarray(json.loads(Path(path).read_text()), dtype=np.float64)
    validate_adjacency(a)
    return a


def save_adjacency(path, a: np.ndarray) -> None:
    Path(path).write_text(json.dumps(np.asarray(a).tolist()))


def validate_adjacency(a: np.ndarray) -> None:
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("adjacency matrix must be square")
    if not np.array_equal(a, a.T):
        raise ValueError("adjacency matrix must be symmetric")
    if np.any(a < 0):
        raise ValueError("adjacency penalties must be non-negative")
    if np.any(np.diag(a) != 0):
        raise ValueError("diagonal (same-class contact) must carry no penalty")


def one_hot(mask: np.ndarray, num_classes: int) -> np.ndarray:
    """[H,W] or [B,H,W] int mask -> float one-hot with a leading class axis per item."""
    mask = np.asarray(mask)
    if mask.min() < 0 or mask.max() >= num_classes:
        raise ValueError("mask labels outside [0, num_classes)")
    oh = np.zeros((num_classes,) + mask.shape, dtype=np.float64)
    for c in range(num_classes):
        oh[c][mask == c] = 1.0
    if mask.ndim == 3:  # [C,B,H,W] -> [B,C,H,W]
        oh = oh.transpose(1, 0, 2, 3)
    return oh


def dice_loss(p: Tensor, y: np.ndarray, eps: float = 1e-6) -> Tensor:
    """Soft dice over foreground classes only (background would swamp it)."""
    if p.shape != y.shape:
        raise ValueError(f"probability/one-hot shape mismatch {p.shape} vs {y.shape}")
    yt = Tensor(y)
    num_fg = p.shape[1] - 1
    total = None
    for c in range(1, p.shape[1]):
        pc, yc = p[:, c], yt[:, c]
        inter = (pc * yc).sum()
        denom = (pc * pc).sum() + (yc * yc).sum()
        score = (2.0 * inter + eps) / (denom + eps)
        total = score if total is None else total + score
    return 1.0 - total * (1.0 / num_fg)


def focal_loss(p: Tensor, y: np.ndarray, alpha_c=None, gamma_f: float = 2.0) -> Tensor:
    """Mean over pixels of -alpha_c (1-p)^gamma_f log p at the true class."""
    b, c = p.shape[:2]
    n_pix = p.data.size // c
    if alpha_c is None:
        ac = np.ones(c)
    else:
        ac = np.asarray(alpha_c, dtype=np.float64)
    weights = Tensor((ac.reshape(1, c, 1, 1) * y))
    pc = ad.clamp(p, 1e-7, 1.0)
    modulated = (1.0 - pc) ** gamma_f if gamma_f != 0.0 else 1.0
    losses = weights * modulated * ad.log(pc)
    return -(losses.sum() * (1.0 / n_pix))


def class_boundary(mask: np.ndarray, c: int) -> np.ndarray:
    """Two-sided 4-connectivity boundary of class c in an int [H,W] mask."""
    m = mask == c
    if not m.any() or m.all():
        return np.zeros_like(m)
    edges = np.zeros_like(m)
    diff_h = m[:-1, :] != m[1:, :]
    edges[:-1, :] |= diff_h
    edges[1:, :] |= diff_h
    diff_w = m[:, :-1] != m[:, 1:]
    edges[:, :-1] |= diff_w
    edges[:, 1:] |= diff_w
    return edges


def distance_transform(mask: np.ndarray, c: int) -> np.ndarray:
    """Exact Euclidean distance to the nearest class-c boundary pixel.

    The boundary is two-sided (edge pixels on both sides of the interface).
    If the class has no boundary in the mask, returns all zeros.
    """
    boundary = class_boundary(mask, c)
    if not boundary.any():
        return np.zeros(mask.shape, dtype=np.float64)
    return ndimage.distance_transform_edt(~boundary)


def boundary_weight_map(mask: np.ndarray, num_classes: int, theta: float) -> np.ndarray:
    """exp(-D_c/theta) per class, stacked as [C,H,W]."""
    return np.stack([np.exp(-distance_transform(mask, c) / theta) for c in range(num_classes)])


def boundary_loss(p: Tensor, y: np.ndarray, masks: np.ndarray, theta: float) -> Tensor:
    """(1/N) sum_i sum_c exp(-D_c(i)/theta) (p_ic - y_ic)^2 over the batch."""
    b, c, h, w = p.shape
    wmap = np.stack([boundary_weight_map(masks[i], c, theta) for i in range(b)])
    diff = p - Tensor(y)
    return (Tensor(wmap) * diff * diff).sum() * (1.0 / (b * h * w))


def struct_loss(p: Tensor, adjacency: np.ndarray) -> Tensor:
    """Soft expectation of the adjacency penalty over 4-neighbor pixel pairs.

    Each unordered horizontal/vertical pair contributes
    sum_{c,c'} A[c,c'] p_i[c] p_j[c']; the result is a mean over all pairs
    so hard one-hot predictions give exactly (#violating pairs)/(#pairs).
    """
    validate_adjacency(adjacency)
    b, c, h, w = p.shape
    a = Tensor(adjacency)
    n_pairs = b * (h * (w - 1) + w * (h - 1))

    def pair_term(pi: Tensor, pj: Tensor) -> Tensor:
        # sum over channels of p_i . (A p_j), vectorized over positions
        bs, _, hh, ww = pi.shape
        flat_j = pj.reshape(bs, c, hh * ww)
        coupled = (a @ flat_j).reshape(bs, c, hh, ww)
        return (pi * coupled).sum()

    horiz = pair_term(p[:, :, :, :-1], p[:, :, :, 1:])
    vert = pair_term(p[:, :, :-1, :], p[:, :, 1:, :])
    return (horiz + vert) * (1.0 / n_pairs)


def composite_loss(logits: Tensor, masks: np.ndarray, weights: LossWeights,
                   adjacency: np.ndarray | None = None) -> tuple[Tensor, dict[str, float]]:
    """Weighted total plus a per-term breakdown (floats, for logging/ablation)."""
    num_classes = logits.shape[1]
    if adjacency is None:
        adjacency = default_adjacency(num_classes)
    p = ad.softmax(logits, axis=1)
    y = one_hot(masks, num_classes)

    total = None
    breakdown: dict[str, float] = {}

    def contribute(name: str, weight: float, term_fn):
        nonlocal total
        if weight == 0.0:
            breakdown[name] = 0.0
            return
        term = term_fn()
        breakdown[name] = term.item()
        piece = term * weight
        total = piece if total is None else total + piece

    contribute("dice", weights.alpha, lambda: dice_loss(p, y, weights.eps))
    contribute("focal", weights.beta, lambda: focal_loss(p, y, weights.alpha_c, weights.gamma_f))
    contribute("boundary", weights.gamma, lambda: boundary_loss(p, y, masks, weights.theta))
    contribute("struct", weights.lam, lambda: struct_loss(p, adjacency))
    if total is None:  # all weights zero: a constant, but keep the graph alive
        total = (p * 0.0).sum()
    breakdown["total"] = total.item()
    return total, breakdown
