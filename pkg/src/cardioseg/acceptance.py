"""The finite-difference gradient suite run by the CLI and the acceptance tests.

Covers every differentiable primitive, the composed attention/decoder blocks,
every loss term, and the full end-to-end model on a 32x32 input.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .csam import Csam, CsamConfig
from .decoder import BoundaryRefinement, ChannelAttention, DecodeStage, SpatialAttention, sobel_gradients
from .encoder import EncoderConfig
from .gradcheck import gradcheck
from .losses import (LossWeights, boundary_loss, composite_loss, default_adjacency,
                     dice_loss, focal_loss, one_hot, struct_loss)
from .model import CardiacSegmenter, ModelConfig
from .decoder import DecoderConfig


def _probe(out: Tensor, r: np.ndarray) -> Tensor:
    return (out * Tensor(r)).sum()


def _primitive_checks(rng: np.random.Generator) -> list[tuple[str, float]]:
    def t(*shape, scale=1.0, positive=False):
        data = rng.standard_normal(shape) * scale
        if positive:
            data = np.abs(data) + 0.5
        return Tensor(data, requires_grad=True)

    results = []

    def add_check(name, op, out_shape, tensors):
        # the cotangent must stay fixed across the finite-difference calls
        r = rng.standard_normal(out_shape)
        results.append((name, gradcheck(lambda: _probe(op(), r), tensors,
                                        seed=int(rng.integers(1 << 31)))))

    a, b = t(3, 4), t(4)
    add_check("add", lambda: a + b, (3, 4), [a, b])
    add_check("mul", lambda: a * b, (3, 4), [a, b])
    c = t(3, 4, positive=True)
    add_check("div", lambda: a / c, (3, 4), [a, c])
    add_check("power", lambda: c**2.5, (3, 4), [c])
    add_check("exp", lambda: ad.exp(a), (3, 4), [a])
    add_check("log", lambda: ad.log(c), (3, 4), [c])
    add_check("sqrt", lambda: ad.sqrt(c), (3, 4), [c])

    x = t(2, 3, 4)
    add_check("reshape", lambda: x.reshape(6, 4), (6, 4), [x])
    add_check("transpose", lambda: x.transpose(2, 0, 1), (4, 2, 3), [x])
    add_check("slice", lambda: x[:, 1:, :2], (2, 2, 2), [x])
    y = t(2, 3, 4)
    add_check("concat", lambda: ad.concat([x, y], axis=1), (2, 6, 4), [x, y])
    add_check("sum", lambda: x.sum(axis=1), (2, 4), [x])
    add_check("mean", lambda: x.mean(axis=(0, 2)), (3,), [x])
    add_check("max", lambda: x.max(axis=2), (2, 3), [x])

    m1, m2 = t(4, 5), t(5, 3)
    add_check("matmul", lambda: m1 @ m2, (4, 3), [m1, m2])

    z = t(12)
    z.data[np.abs(z.data) < 0.05] = 0.5
    add_check("relu", lambda: ad.relu(z), (12,), [z])
    add_check("sigmoid", lambda: ad.sigmoid(z), (12,), [z])
    add_check("gelu", lambda: ad.gelu(z), (12,), [z])
    add_check("clamp", lambda: ad.clamp(z, -0.9, 0.9), (12,), [z])

    s = t(3, 7)
    add_check("softmax", lambda: ad.softmax(s, axis=-1), (3, 7), [s])
    ln_x, ln_g, ln_b = t(4, 6), t(6), t(6)
    add_check("layer_norm", lambda: ad.layer_norm(ln_x, ln_g, ln_b), (4, 6), [ln_x, ln_g, ln_b])

    cx, cw, cb = t(2, 4, 5, 5), t(6, 4, 3, 3, scale=0.5), t(6)
    add_check("conv2d", lambda: ad.conv2d(cx, cw, cb, 2, 1), (2, 6, 3, 3), [cx, cw, cb])
    dw = t(4, 1, 3, 3, scale=0.5)
    add_check("conv2d_depthwise", lambda: ad.conv2d(cx, dw, None, 1, 1, groups=4),
              (2, 4, 5, 5), [cx, dw])
    tx, tw = t(2, 3, 4, 4), t(3, 5, 2, 2, scale=0.5)
    add_check("conv_transpose2d", lambda: ad.conv_transpose2d(tx, tw, None, 2, 0),
              (2, 5, 8, 8), [tx, tw])

    ix = t(2, 3, 4, 5)
    add_check("interpolate_bilinear", lambda: ad.interpolate_bilinear(ix, 7, 9),
              (2, 3, 7, 9), [ix])
    px = t(2, 3, 4, 4)
    add_check("pool_global_avg", lambda: ad.pool("global_avg", px), (2, 3), [px])
    add_check("pool_channel_avg", lambda: ad.pool("channel_avg", px), (2, 1, 4, 4), [px])
    add_check("pool_channel_max", lambda: ad.pool("channel_max", px), (2, 1, 4, 4), [px])
    sx = t(1, 2, 5, 5)
    add_check("sobel_gradients", lambda: sobel_gradients(sx), (1, 2, 5, 5), [sx])
    return results


def _block_checks(rng: np.random.Generator) -> list[tuple[str, float]]:
    results = []

    csam = Csam(np.random.default_rng(11), 4, CsamConfig(structures=2, heads=2))
    csam.fuse.weight.data[:] = rng.standard_normal(csam.fuse.weight.shape) * 0.3
    f = Tensor(rng.standard_normal((1, 4, 2, 2)))
    rc = rng.standard_normal((1, 4, 2, 2))
    results.append(("csam_block",
                    gradcheck(lambda: _probe(csam(f), rc), csam.trainable_parameters())))

    ca = ChannelAttention(np.random.default_rng(12), 6, 3)
    u = Tensor(rng.standard_normal((2, 6, 3, 3)))
    rca = rng.standard_normal((2, 6))
    results.append(("channel_attention",
                    gradcheck(lambda: _probe(ca(u), rca), ca.trainable_parameters())))

    sa = SpatialAttention(np.random.default_rng(13))
    rsa = rng.standard_normal((2, 1, 3, 3))
    results.append(("spatial_attention",
                    gradcheck(lambda: _probe(sa(u), rsa), sa.trainable_parameters())))

    stage = DecodeStage(np.random.default_rng(14), 4, 2, 2, attention=True)
    su = Tensor(rng.standard_normal((1, 4, 3, 3)))
    rst = rng.standard_normal((1, 2, 6, 6))
    results.append(("decode_stage",
                    gradcheck(lambda: _probe(stage(su), rst), stage.trainable_parameters())))

    brm = BoundaryRefinement(np.random.default_rng(15), 3, 4, 2)
    brm.grad_conv.weight.data[:] = rng.standard_normal(brm.grad_conv.weight.shape) * 0.3
    fd = Tensor(rng.standard_normal((1, 3, 4, 4)))
    fms = Tensor(rng.standard_normal((1, 4, 4, 4)))
    rb = rng.standard_normal((1, 2, 4, 4))
    results.append(("brm_block",
                    gradcheck(lambda: _probe(brm(fd, fms)[0], rb), brm.trainable_parameters())))
    return results


def _loss_checks(rng: np.random.Generator) -> list[tuple[str, float]]:
    logits = Tensor(rng.standard_normal((1, 4, 4, 4)), requires_grad=True)
    mask = rng.integers(0, 4, size=(1, 4, 4))
    y = one_hot(mask, 4)
    adj = default_adjacency(4)

    def p():
        return ad.softmax(logits, axis=1)

    checks = [
        ("dice_loss", lambda: dice_loss(p(), y, 1e-6)),
        ("focal_loss", lambda: focal_loss(p(), y, None, 2.0)),
        ("boundary_loss", lambda: boundary_loss(p(), y, mask, 3.0)),
        ("struct_loss", lambda: struct_loss(p(), adj)),
        ("composite_loss", lambda: composite_loss(logits, mask, LossWeights(theta=3.0), adj)[0]),
    ]
    return [(name, gradcheck(build, [logits])) for name, build in checks]


def full_model_check(seed: int = 0, max_entries: int = 3) -> float:
    """End-to-end gradcheck on a 32x32 input; sampled entries per parameter."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(
        encoder=EncoderConfig(input_size=32, patch_size=8, embed_dim=32, depth=1, heads=2),
        csam=CsamConfig(structures=2, heads=2),
        decoder=DecoderConfig(width_multiplier=0.125, num_classes=4),
        seed=seed,
    )
    model = CardiacSegmenter(cfg)
    # move the residual adapters off their zero init so their grads are generic
    model.csam.fuse.weight.data[:] = rng.standard_normal(model.csam.fuse.weight.shape) * 0.1
    model.decoder.head.grad_conv.weight.data[:] = (
        rng.standard_normal(model.decoder.head.grad_conv.weight.shape) * 0.1)
    x = Tensor(rng.standard_normal((1, 1, 32, 32)))
    r = rng.standard_normal((1, 4, 32, 32))
    params = model.trainable_parameters()
    return gradcheck(lambda: _probe(model(x), r), params,
                     max_entries=max_entries, seed=seed, kink_tol=1e-3)


def gradient_suite(seed: int = 0) -> list[tuple[str, float]]:
    rng = np.random.default_rng(seed)
    results = []
    results.extend(_primitive_checks(rng))
    results.extend(_block_checks(rng))
    results.extend(_loss_checks(rng))
    results.append(("full_model_32x32", full_model_check(seed)))
    return results
