"""Frozen vision-transformer feature extractor.

A desk-scale stand-in for a pretrained foundation backbone: seed-fixed
random weights, patch embedding with a prepended class token, learnable
positional embeddings, and pre-norm transformer blocks. All parameters
are excluded from gradient updates; the training contract is that their
checksum never changes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Linear, LayerNorm, Module, param, xavier_init


@dataclass
class EncoderConfig:
    input_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    seed: int = 0
    frozen: bool = True

    def __post_init__(self):
        if self.input_size % self.patch_size:
            raise ValueError("input_size must be divisible by patch_size")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.input_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid * self.grid


def patchify(x: Tensor, patch: int) -> Tensor:
    """[B,3,S,S] -> [B,N,P*P*3] row-major patches, (channel, py, px) inside."""
    b, c, s, s2 = x.shape
    if s % patch or s2 % patch:
        raise ValueError(f"spatial extent {s}x{s2} not divisible by patch {patch}")
    g, g2 = s // patch, s2 // patch
    x = x.reshape(b, c, g, patch, g2, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, g * g2, c * patch * patch)


def unpatchify(tokens: Tensor, patch: int, channels: int = 3) -> Tensor:
    b, n, _ = tokens.shape
    g = int(round(np.sqrt(n)))
    x = tokens.reshape(b, g, g, channels, patch, patch)
    x = x.transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, g * patch, g * patch)


def broadcast_grayscale(x: Tensor, size: int) -> Tensor:
    """[B,1,H,W] -> [B,3,size,size]: bilinear resize then channel triplication."""
    resized = ad.interpolate_bilinear(x, size, size)
    return ad.concat([resized, resized, resized], axis=1)


class MultiHeadSelfAttention(Module):
    def __init__(self, rng, dim: int, heads: int):
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.wq = Linear(rng, dim, dim)
        self.wk = Linear(rng, dim, dim)
        self.wv = Linear(rng, dim, dim)
        self.wo = Linear(rng, dim, dim)
        self.heads = heads

    def __call__(self, x: Tensor) -> Tensor:
        b, t, c = x.shape
        h = self.heads
        d = c // h
        q = self.wq(x).reshape(b, t, h, d).transpose(0, 2, 1, 3)
        k = self.wk(x).reshape(b, t, h, d).transpose(0, 2, 1, 3)
        v = self.wv(x).reshape(b, t, h, d).transpose(0, 2, 1, 3)
        att = ad.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d)), axis=-1)
        out = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, c)
        return self.wo(out)


class TransformerBlock(Module):
    def __init__(self, rng, dim: int, heads: int, mlp_ratio: float):
        hidden = int(dim * mlp_ratio)
        self.ln1 = LayerNorm(dim)
        self.msa = MultiHeadSelfAttention(rng, dim, heads)
        self.ln2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, z: Tensor) -> Tensor:
        z = self.msa(self.ln1(z)) + z
        return self.fc2(ad.gelu(self.fc1(self.ln2(z)))) + z


class FrozenEncoder(Module):
    """Patch embedding + positional embeddings + transformer stack -> [B,C,h,w]."""

    def __init__(self, config: EncoderConfig):
        rng = np.random.default_rng(config.seed)
        c, p = config.embed_dim, config.patch_size
        self.patch_proj = xavier_init(rng, (p * p * 3, c), p * p * 3, c)
        self.cls_token = param(rng.normal(0.0, 0.02, size=(1, 1, c)))
        self.pos_embed = param(rng.normal(0.0, 0.02, size=(1, config.tokens + 1, c)))
        self.blocks = [TransformerBlock(rng, c, config.heads, config.mlp_ratio)
                       for _ in range(config.depth)]
        self.config = config
        if config.frozen:
            self.freeze()

    def encode(self, x: Tensor) -> Tensor:
        cfg = self.config
        b = x.shape[0]
        rgb = broadcast_grayscale(x, cfg.input_size)
        tok = patchify(rgb, cfg.patch_size) @ self.patch_proj
        cls = self.cls_token * Tensor(np.ones((b, 1, 1)))
        z = ad.concat([cls, tok], axis=1) + self.pos_embed
        for blk in self.blocks:
            z = blk(z)
        spatial = z[:, 1:, :]  # class token dropped before the spatial reshape
        g = cfg.grid
        return spatial.transpose(0, 2, 1).reshape(b, cfg.embed_dim, g, g)

    __call__ = encode

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}


def assert_frozen(before: dict[str, np.ndarray], after: dict[str, np.ndarray]) -> bool:
    """True iff both snapshots hold bit-identical parameters."""
    if set(before) != set(after):
        raise ValueError("snapshots list different parameters")
    for name in before:
        if before[name].shape != after[name].shape:
            raise ValueError(f"snapshot shape mismatch for {name}")
        if not np.array_equal(before[name], after[name]):
            return False
    return True
