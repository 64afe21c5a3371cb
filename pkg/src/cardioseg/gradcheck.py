"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, finite_check


def relative_error(analytic: float, numeric: float, floor: float = 1e-2) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(build_loss, tensors, h: float = 1e-5, max_entries: int | None = None,
              seed: int = 0, kink_tol: float | None = None, retry_h: float = 1e-7) -> float:
    """Compare reverse-mode grads of ``build_loss()`` against central differences.

    build_loss must construct a fresh scalar-Tensor graph from the current
    values of ``tensors`` on every call. Returns the worst relative error
    over all checked entries (all of them, or ``max_entries`` per tensor
    sampled with a seeded rng for big tensors).

    kink_tol: in deep compositions a probe can straddle a relu/max kink at
    step h, which biases the central difference no matter how exact the
    gradient is. Entries exceeding kink_tol are re-measured at retry_h: a
    straddle resolves, a genuinely wrong gradient keeps failing.
    """
    tensors = list(tensors)
    for t in tensors:
        t.zero_grad()
    with finite_check():
        loss = build_loss()
    loss.backward()
    analytic = []
    for t in tensors:
        if t.grad is None:
            t.grad = np.zeros_like(t.data)
        analytic.append(t.grad.copy())

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            idxs = rng.choice(n, size=max_entries, replace=False)
        else:
            idxs = range(n)
        for i in idxs:
            def central(step: float) -> float:
                orig = flat[i]
                flat[i] = orig + step
                fp = float(build_loss().data)
                flat[i] = orig - step
                fm = float(build_loss().data)
                flat[i] = orig
                return (fp - fm) / (2.0 * step)

            err = relative_error(ga.reshape(-1)[i], central(h))
            if kink_tol is not None and err > kink_tol:
                err = relative_error(ga.reshape(-1)[i], central(retry_h))
            worst = max(worst, err)
    for t in tensors:
        t.zero_grad()
    return worst


def weighted_sum(out: Tensor, rng: np.random.Generator) -> np.ndarray:
    """A fixed random cotangent so reductions do not mask sign errors."""
    return rng.standard_normal(out.shape)
