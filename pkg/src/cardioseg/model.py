"""The full segmentation network: frozen encoder -> CSAM -> decoder/BRM."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .csam import Csam, CsamConfig
from .decoder import Decoder, DecoderConfig
from .encoder import EncoderConfig, FrozenEncoder
from .nn import Module
from .tensor_io import load_weight_dir, save_tns, save_weight_dir


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    csam: CsamConfig = field(default_factory=CsamConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    use_csam: bool = True
    multi_scale: bool = True
    use_brm: bool = True
    seed: int = 0  # trainable-weight initialization


class CardiacSegmenter(Module):
    def __init__(self, config: ModelConfig):
        rng = np.random.default_rng(config.seed)
        self.encoder = FrozenEncoder(config.encoder)
        self.csam = Csam(rng, config.encoder.embed_dim, config.csam) if config.use_csam else None
        self.decoder = Decoder(rng, config.encoder.embed_dim, config.decoder,
                               multi_scale=config.multi_scale, use_brm=config.use_brm)
        self.config = config

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)[0]

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor | None]:
        """[B,1,H,W] image -> ([B,C,H,W] logits, edge probability map or None)."""
        _, _, h, w = x.shape
        feat = self.encoder.encode(x)
        if self.csam is not None:
            feat = self.csam(feat)
        return self.decoder(feat, h, w)

    def predict(self, x: Tensor) -> np.ndarray:
        """Hard class mask [B,H,W] (no-grad forward + per-pixel argmax)."""
        with ad.no_grad():
            logits = self(x)
        return np.argmax(logits.data, axis=1)

    def predict_probs(self, x: Tensor) -> np.ndarray:
        with ad.no_grad():
            probs = ad.softmax(self(x), axis=1)
        return probs.data

    def save_weights(self, dirpath, extra: dict | None = None) -> None:
        save_weight_dir(dirpath, self.state_dict(), extra)

    def load_weights(self, dirpath) -> dict:
        state, extra = load_weight_dir(dirpath)
        self.load_state_dict(state)
        return extra


def export_prediction(outdir, stem: str, mask: np.ndarray, probs: np.ndarray | None = None) -> None:
    """Write a class-indexed 8-bit mask image and optional per-class prob maps."""
    from PIL import Image

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.astype(np.uint8), mode="L").save(out / f"{stem}_mask.png")
    if probs is not None:
        for c in range(probs.shape[0]):
            save_tns(out / f"{stem}_prob_c{c}.tns", probs[c])
