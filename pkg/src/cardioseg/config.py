"""Run configuration: a flat key=value file, presets, overrides, hashing."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .csam import CsamConfig
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .losses import LOSS_PRESETS, LossWeights
from .model import ModelConfig


@dataclass
class RunConfig:
    # model architecture
    input_size: int = 64
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    encoder_seed: int = 0
    freeze_backbone: bool = True
    structures: int = 3
    d_k: int = 0                  # 0 = default (embed_dim)
    csam_heads: int = 4
    width_multiplier: float = 0.25
    reduction: int = 16
    num_classes: int = 4
    brm_width: int = 64
    fused_scale: int = 4
    # ablation switches
    use_csam: bool = True
    multi_scale: bool = True
    use_brm: bool = True
    # loss
    loss_preset: str = "custom"   # custom = use the alpha..lambda keys below
    alpha: float = 0.5
    beta: float = 0.3
    gamma: float = 0.2
    lam: float = 0.1
    gamma_f: float = 2.0
    theta: float = 5.0
    dice_eps: float = 1e-6
    adjacency_file: str = ""
    # optimization
    epochs: int = 30
    batch_size: int = 8
    seed: int = 0
    lr_decoder: float = 1e-3
    lr_backbone: float = 1e-5
    weight_decay: float = 1e-4
    eta_min_frac: float = 0.01
    # data & augmentation
    patients: int = 30
    slices: int = 3
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    augment: bool = True
    rotate_deg: float = 15.0
    scale_lo: float = 0.9
    scale_hi: float = 1.1
    elastic_alpha: float = 2.0
    elastic_sigma: float = 8.0
    spacing_mm: float = 1.0

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            encoder=EncoderConfig(self.input_size, self.patch_size, self.embed_dim,
                                  self.depth, self.heads, self.mlp_ratio,
                                  self.encoder_seed, self.freeze_backbone),
            csam=CsamConfig(self.structures, self.d_k or None, self.csam_heads),
            decoder=DecoderConfig(width_multiplier=self.width_multiplier,
                                  reduction=self.reduction, num_classes=self.num_classes,
                                  brm_width=self.brm_width, fused_scale=self.fused_scale),
            use_csam=self.use_csam, multi_scale=self.multi_scale, use_brm=self.use_brm,
            seed=self.seed,
        )

    def loss_weights(self) -> LossWeights:
        kw = dict(alpha=self.alpha, beta=self.beta, gamma=self.gamma, lam=self.lam,
                  gamma_f=self.gamma_f, theta=self.theta, eps=self.dice_eps)
        if self.loss_preset != "custom":
            if self.loss_preset not in LOSS_PRESETS:
                raise ValueError(f"unknown loss preset {self.loss_preset!r}")
            kw.update(LOSS_PRESETS[self.loss_preset])
        return LossWeights(**kw)

    def to_flat(self) -> dict[str, str]:
        return {f.name: _format_value(getattr(self, f.name)) for f in fields(self)}

    def config_hash(self) -> str:
        blob = json.dumps(self.to_flat(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
VALID_KEYS = sorted(_FIELD_TYPES)

# named presets applied before file values and --set overrides
PRESETS: dict[str, dict[str, object]] = {
    "desk": {},  # the dataclass defaults
    "paper-s34": {
        "input_size": 224, "patch_size": 16, "embed_dim": 256, "depth": 4,
        "heads": 8, "width_multiplier": 1.0, "epochs": 30, "batch_size": 16,
        "lr_decoder": 1e-4, "weight_decay": 1e-4, "loss_preset": "hybrid",
    },
}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_value(key: str, raw: str):
    ftype = _FIELD_TYPES[key]
    raw = raw.strip()
    if ftype == "bool" or ftype is bool:
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if ftype == "int" or ftype is int:
        return int(raw)
    if ftype == "float" or ftype is float:
        return float(raw)
    return raw


def unknown_key_error(key: str) -> ValueError:
    return ValueError(f"unknown config key {key!r}; valid keys: {', '.join(VALID_KEYS)}")


def apply_pairs(config: RunConfig, pairs: dict[str, str]) -> RunConfig:
    for key, raw in pairs.items():
        if key == "preset":
            if raw not in PRESETS:
                raise ValueError(f"unknown preset {raw!r}; valid: {sorted(PRESETS)}")
            for k, v in PRESETS[raw].items():
                setattr(config, k, v)
            continue
        if key not in _FIELD_TYPES:
            raise unknown_key_error(key)
        setattr(config, key, _parse_value(key, raw))
    return config


def parse_config_file(path) -> dict[str, str]:
    """Lines of `key = value`; blank lines and #-comments ignored."""
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected `key = value`")
        key, raw = stripped.split("=", 1)
        pairs[key.strip()] = raw.strip()
    return pairs


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    """defaults -> preset -> config file -> --set overrides, in that order."""
    config = RunConfig()
    file_pairs = parse_config_file(path) if path else {}
    if "preset" in file_pairs:
        apply_pairs(config, {"preset": file_pairs.pop("preset")})
    apply_pairs(config, file_pairs)
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        apply_pairs(config, {key.strip(): raw.strip()})
    return config


def write_config_file(path, config: RunConfig) -> None:
    lines = [f"{k} = {v}" for k, v in config.to_flat().items()]
    Path(path).write_text("\n".join(lines) + "\n")
