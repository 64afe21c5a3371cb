"""Multi-scale decoder with dual attention and gradient boundary refinement.

Three transposed-conv upsampling stages (channel widths 512-256-128-64,
scaled by a width multiplier for desk runs), each followed by a residual
block gated by squeeze-excitation channel attention and then a 7x7
spatial attention map. Stage outputs are resized to a common fused
resolution (encoder grid x4), projected, concatenated, and reduced into
a multi-scale context that joins the boundary refinement head.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Conv2d, ConvTranspose2d, Linear, Module

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = np.array([[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]])
SOBEL_EPS = 1e-12  # guards the sqrt derivative on flat fields


@dataclass
class DecoderConfig:
    stage_widths: tuple[int, ...] = (512, 256, 128, 64)
    width_multiplier: float = 0.25
    reduction: int = 16
    num_classes: int = 4          # background, RV, myocardium, LV
    brm_width: int = 64           # scaled by the multiplier like stage widths
    fused_scale: int = 4          # fused resolution = encoder grid x this

    def widths(self) -> list[int]:
        return [max(4, int(round(w * self.width_multiplier))) for w in self.stage_widths]

    def brm_channels(self) -> int:
        return max(8, int(round(self.brm_width * self.width_multiplier)))


def _replicate_pad1(x: Tensor) -> Tensor:
    """Edge-replicating 1px pad, so flat fields stay flat under Sobel."""
    b, c, h, w = x.shape
    ih = np.clip(np.arange(-1, h + 1), 0, h - 1)
    iw = np.clip(np.arange(-1, w + 1), 0, w - 1)
    out = x.data[:, :, ih][:, :, :, iw]

    def backward(g):
        if x.requires_grad:
            tmp = np.zeros((b, c, h, w + 2))
            np.add.at(tmp, (slice(None), slice(None), ih), g)
            gx = np.zeros_like(x.data)
            np.add.at(gx, (slice(None), slice(None), slice(None), iw), tmp)
            x._accumulate(gx)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward)


def sobel_gradients(x: Tensor) -> Tensor:
    """Per-channel gradient magnitude sqrt((x*Gx)^2 + (x*Gy)^2 + eps).

    Uses replicate padding so a constant image responds with exactly
    sqrt(eps) everywhere, borders included.
    """
    c = x.shape[1]
    wx = Tensor(np.tile(SOBEL_X[None, None], (c, 1, 1, 1)))
    wy = Tensor(np.tile(SOBEL_Y[None, None], (c, 1, 1, 1)))
    xp = _replicate_pad1(x)
    gx = ad.conv2d(xp, wx, groups=c)
    gy = ad.conv2d(xp, wy, groups=c)
    return ad.sqrt(gx * gx + gy * gy + SOBEL_EPS)


class ChannelAttention(Module):
    """Squeeze-excitation gate: sigmoid(W2 relu(W1 GAP(U))) in (0,1)^C."""

    def __init__(self, rng, channels: int, reduction: int):
        hidden = max(1, channels // min(reduction, channels))
        self.fc1 = Linear(rng, channels, hidden)
        self.fc2 = Linear(rng, hidden, channels)

    def __call__(self, u: Tensor) -> Tensor:
        return ad.sigmoid(self.fc2(ad.relu(self.fc1(ad.pool("global_avg", u)))))


class SpatialAttention(Module):
    def __init__(self, rng):
        self.conv = Conv2d(rng, 2, 1, 7, padding=3)

    def __call__(self, u: Tensor) -> Tensor:
        stacked = ad.concat([ad.pool("channel_avg", u), ad.pool("channel_max", u)], axis=1)
        return ad.sigmoid(self.conv(stacked))


class DecodeStage(Module):
    """2x upsample, then (optionally) a residual block gated by M_c and M_s."""

    def __init__(self, rng, cin: int, cout: int, reduction: int, attention: bool):
        self.up = ConvTranspose2d(rng, cin, cout, 2, stride=2)
        self.attention = attention
        if attention:
            self.conv1 = Conv2d(rng, cout, cout, 3, padding=1)
            self.conv2 = Conv2d(rng, cout, cout, 3, padding=1)
            self.ca = ChannelAttention(rng, cout, reduction)
            self.sa = SpatialAttention(rng)

    def __call__(self, u: Tensor) -> Tensor:
        u = ad.relu(self.up(u))
        if not self.attention:
            return u
        res = ad.relu(u + self.conv2(ad.relu(self.conv1(u))))
        b, c = res.shape[:2]
        res = res * self.ca(res).reshape(b, c, 1, 1)  # channel gate, broadcast over space
        return res * self.sa(res)                     # spatial gate, broadcast over channels


class MultiScaleFusion(Module):
    """Resize every stage output to the fused grid, project, concat, reduce."""

    def __init__(self, rng, stage_channels: list[int], out_channels: int):
        if not stage_channels:
            raise ValueError("need at least one stage output")
        self.projs = [Conv2d(rng, c, out_channels, 1) for c in stage_channels]
        self.reduce = Conv2d(rng, out_channels * len(stage_channels), out_channels, 1)

    def __call__(self, stage_outputs: list[Tensor], th: int, tw: int) -> Tensor:
        parts = [proj(ad.interpolate_bilinear(o, th, tw))
                 for proj, o in zip(self.projs, stage_outputs)]
        return self.reduce(ad.concat(parts, axis=1))


class BoundaryRefinement(Module):
    """Edge-probability head plus Sobel-magnitude residual before the classifier."""

    def __init__(self, rng, fd_channels: int, width: int, num_classes: int):
        self.edge_head = Conv2d(rng, fd_channels, 1, 1)
        self.merge = Conv2d(rng, fd_channels + 1, width, 3, padding=1)
        # zero-init: refinement starts as a pure residual pass-through
        self.grad_conv = Conv2d(rng, width, width, 1, zero_init=True)
        self.fuse = Conv2d(rng, width, width, 3, padding=1)
        self.classifier = Conv2d(rng, width, num_classes, 1)

    def __call__(self, fd: Tensor, fms: Tensor) -> tuple[Tensor, Tensor]:
        if fd.shape[2:] != fms.shape[2:]:
            raise ValueError(f"misaligned inputs {fd.shape} vs {fms.shape}")
        edge = ad.sigmoid(self.edge_head(fd))
        merged = self.merge(ad.concat([fd, edge], axis=1))
        refined = merged + self.grad_conv(sobel_gradients(merged))
        fout = ad.relu(self.fuse(refined + fms))
        return self.classifier(fout), edge


class PlainHead(Module):
    """Classifier used when boundary refinement is ablated away."""

    def __init__(self, rng, fd_channels: int, width: int, num_classes: int):
        self.align = Conv2d(rng, fd_channels, width, 1)
        self.fuse = Conv2d(rng, width, width, 3, padding=1)
        self.classifier = Conv2d(rng, width, num_classes, 1)

    def __call__(self, fd: Tensor, fms: Tensor) -> tuple[Tensor, Tensor]:
        fout = ad.relu(self.fuse(self.align(fd) + fms))
        return self.classifier(fout), None


def upsample_logits(logits: Tensor, h: int, w: int) -> Tensor:
    """Bilinear map from the fused grid to the image grid (identity if equal)."""
    return ad.interpolate_bilinear(logits, h, w)


class Decoder(Module):
    """Full decoding path from the attention feature map to class logits.

    multi_scale=False degrades the stages to plain transposed convolutions
    and drops the dense fusion (the "basic decoder" ablation baseline);
    use_brm=False swaps the refinement head for a plain classifier.
    """

    def __init__(self, rng, in_channels: int, config: DecoderConfig,
                 multi_scale: bool = True, use_brm: bool = True):
        widths = config.widths()
        brm_w = config.brm_channels()
        self.inproj = Conv2d(rng, in_channels, widths[0], 1)
        self.stages = [DecodeStage(rng, widths[i], widths[i + 1], config.reduction, multi_scale)
                       for i in range(len(widths) - 1)]
        self.multi_scale = multi_scale
        if multi_scale:
            self.fusion = MultiScaleFusion(rng, widths[1:], brm_w)
        if use_brm:
            self.head = BoundaryRefinement(rng, widths[-1], brm_w, config.num_classes)
        else:
            self.head = PlainHead(rng, widths[-1], brm_w, config.num_classes)
        self.brm_w = brm_w
        self.fused_scale = config.fused_scale

    def __call__(self, feat: Tensor, out_h: int, out_w: int) -> tuple[Tensor, Tensor | None]:
        b, _, gh, gw = feat.shape
        th, tw = gh * self.fused_scale, gw * self.fused_scale
        u = ad.relu(self.inproj(feat))
        outs = []
        for stage in self.stages:
            u = stage(u)
            outs.append(u)
        fd = ad.interpolate_bilinear(outs[-1], th, tw)
        if self.multi_scale:
            fms = self.fusion(outs, th, tw)
        else:
            fms = Tensor(np.zeros((b, self.brm_w, th, tw)))
        logits_low, edge = self.head(fd, fms)
        return upsample_logits(logits_low, out_h, out_w), edge
