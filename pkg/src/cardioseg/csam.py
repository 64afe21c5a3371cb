"""Cardiac-specific attention over the encoder feature map.

Per-structure depthwise priors condition single-head attention branches,
a multi-head branch keeps global context, and a zero-initialized 1x1
fusion merges everything as a residual update — so at initialization the
module is exactly the identity.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import MultiHeadSelfAttention
from .nn import Conv2d, Module, xavier_init


@dataclass
class CsamConfig:
    structures: int = 3          # foreground structures: RV, myocardium, LV
    d_k: int | None = None       # key width per branch; defaults to embed_dim
    heads: int = 4               # heads of the global branch


def _to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w).transpose(0, 2, 1)


def _to_spatial(tokens: Tensor, h: int, w: int) -> Tensor:
    b, _, c = tokens.shape
    return tokens.transpose(0, 2, 1).reshape(b, c, h, w)


class StructureAttention(Module):
    """Single-head attention on prior-conditioned tokens (no output proj)."""

    def __init__(self, rng, dim: int, d_k: int):
        if d_k <= 0:
            raise ValueError("d_k must be positive")
        self.wq = xavier_init(rng, (dim, d_k), dim, d_k)
        self.wk = xavier_init(rng, (dim, d_k), dim, d_k)
        self.wv = xavier_init(rng, (dim, dim), dim, dim)
        self.d_k = d_k

    def __call__(self, tokens: Tensor) -> Tensor:
        q = tokens @ self.wq
        k = tokens @ self.wk
        v = tokens @ self.wv
        att = ad.softmax((q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(self.d_k)), axis=-1)
        return att @ v


class Csam(Module):
    def __init__(self, rng, embed_dim: int, config: CsamConfig):
        k = config.structures
        if k < 1:
            raise ValueError("need at least one structure")
        d_k = config.d_k or embed_dim
        self.priors = [Conv2d(rng, embed_dim, embed_dim, 3, padding=1, groups=embed_dim)
                       for _ in range(k)]
        self.branches = [StructureAttention(rng, embed_dim, d_k) for _ in range(k)]
        self.global_attn = MultiHeadSelfAttention(rng, embed_dim, config.heads)
        # zero-init: training starts from F' == F
        self.fuse = Conv2d(rng, (k + 1) * embed_dim, embed_dim, 1, zero_init=True)
        self.structures = k

    def structure_prior(self, feat: Tensor, k: int) -> Tensor:
        if not 1 <= k <= self.structures:
            raise ValueError(f"structure index {k} outside 1..{self.structures}")
        return self.priors[k - 1](feat)

    def structure_attention(self, feat: Tensor, prior: Tensor, k: int) -> Tensor:
        _, _, h, w = feat.shape
        return _to_spatial(self.branches[k - 1](_to_tokens(feat + prior)), h, w)

    def global_context(self, feat: Tensor) -> Tensor:
        _, _, h, w = feat.shape
        return _to_spatial(self.global_attn(_to_tokens(feat)), h, w)

    def fuse_residual(self, feat: Tensor, global_ctx: Tensor, branches: list[Tensor]) -> Tensor:
        # channel order fixed: global context first, then structures ascending
        return feat + self.fuse(ad.concat([global_ctx] + branches, axis=1))

    def __call__(self, feat: Tensor) -> Tensor:
        g = self.global_context(feat)
        s = [self.structure_attention(feat, self.structure_prior(feat, k), k)
             for k in range(1, self.structures + 1)]
        return self.fuse_residual(feat, g, s)
