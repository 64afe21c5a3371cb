"""AdamW with decoupled weight decay, parameter groups, cosine annealing."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class ParamGroup:
    params: list[Tensor]
    names: list[str]
    base_lr: float
    weight_decay: float
    tag: str  # "backbone" or "decoder"


def cosine_lr(t: int, total: int, eta_max: float, eta_min: float = 0.0) -> float:
    """eta_min + 0.5 (eta_max - eta_min)(1 + cos(pi t / T)); decreasing on [0, T]."""
    if total <= 0:
        raise ValueError("schedule length must be positive")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + np.cos(np.pi * t / total))


def build_groups(model, lr_decoder: float = 1e-3, lr_backbone: float = 1e-5,
                 weight_decay: float = 1e-4) -> list[ParamGroup]:
    """Frozen encoder params join no group; an unfrozen encoder becomes the
    backbone group with its much smaller step size."""
    backbone, decoder = ([], []), ([], [])
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        bucket = backbone if name.startswith("encoder.") else decoder
        bucket[0].append(p)
        bucket[1].append(name)
    seen = set()
    for plist, _ in (backbone, decoder):
        for p in plist:
            if id(p) in seen:
                raise ValueError("parameter claimed by two groups")
            seen.add(id(p))
    groups = []
    if backbone[0]:
        groups.append(ParamGroup(backbone[0], backbone[1], lr_backbone, weight_decay, "backbone"))
    groups.append(ParamGroup(decoder[0], decoder[1], lr_decoder, weight_decay, "decoder"))
    return groups


class AdamW:
    """Decoupled weight decay: p <- p - lr*adam_step - lr*wd*p."""

    def __init__(self, groups: list[ParamGroup], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.groups = groups
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = [[np.zeros_like(p.data) for p in g.params] for g in groups]
        self.v = [[np.zeros_like(p.data) for p in g.params] for g in groups]

    def step(self, lr_scale: float = 1.0) -> None:
        """One update; each group's lr is base_lr * lr_scale (scheduler factor)."""
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for gi, group in enumerate(self.groups):
            lr = group.base_lr * lr_scale
            for pi, p in enumerate(group.params):
                if p.grad is None:
                    raise ValueError(f"missing grad for parameter {group.names[pi]}")
                g = p.grad
                m = self.m[gi][pi]
                v = self.v[gi][pi]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                p.data = p.data - lr * update - lr * group.weight_decay * p.data

    def zero_grad(self) -> None:
        for group in self.groups:
            for p in group.params:
                p.grad = None

    def state_dict(self) -> dict:
        return {
            "step": self.step_count,
            "m": [[m.copy() for m in gm] for gm in self.m],
            "v": [[v.copy() for v in gv] for gv in self.v],
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for gi in range(len(self.groups)):
            for pi in range(len(self.groups[gi].params)):
                self.m[gi][pi] = np.asarray(state["m"][gi][pi], dtype=np.float64).copy()
                self.v[gi][pi] = np.asarray(state["v"][gi][pi], dtype=np.float64).copy()
