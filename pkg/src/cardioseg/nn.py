"""Parameter containers and the small layer zoo the segmentation model needs."""
from __future__ import annotations

import zlib

import numpy as np

from .autodiff import Tensor, conv2d, conv_transpose2d, layer_norm, matmul


class Module:
    """Base class: tracks parameters by attribute name, recursively."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{full}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    def checksum(self) -> int:
        """CRC32 over all parameter bytes, in name order."""
        crc = 0
        for name, p in sorted(self.named_parameters()):
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(np.ascontiguousarray(p.data).tobytes(), crc)
        return crc


def param(data, requires_grad: bool = True) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def he_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    return param(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))


def xavier_init(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform(-bound, bound, size=shape))


class Linear(Module):
    def __init__(self, rng, in_features: int, out_features: int, bias: bool = True):
        self.weight = xavier_init(rng, (in_features, out_features), in_features, out_features)
        self.bias = param(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0,
                 groups: int = 1, bias: bool = True, zero_init: bool = False):
        fan_in = (cin // groups) * k * k
        if zero_init:
            self.weight = param(np.zeros((cout, cin // groups, k, k)))
        else:
            self.weight = he_init(rng, (cout, cin // groups, k, k), fan_in)
        self.bias = param(np.zeros(cout)) if bias else None
        self.stride, self.padding, self.groups = stride, padding, groups

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class ConvTranspose2d(Module):
    def __init__(self, rng, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0, bias: bool = True):
        fan_in = cin * k * k
        self.weight = he_init(rng, (cin, cout, k, k), fan_in)
        self.bias = param(np.zeros(cout)) if bias else None
        self.stride, self.padding = stride, padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)
