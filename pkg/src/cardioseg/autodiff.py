"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a Tensor wraps a numpy array plus an
optional gradient buffer, and every primitive builds a backward closure
that scatters exact analytic gradients to its inputs. Convolutions use
the cross-correlation convention (no kernel flip) throughout, and
bilinear resampling uses half-pixel centers.
"""
from __future__ import annotations

import functools
import threading
from contextlib import contextmanager

import numpy as np
from scipy import special as _special

DTYPE = np.float64

_state = threading.local()  # per-thread mode flags: eval may run on workers


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def _finite_enabled() -> bool:
    return getattr(_state, "finite", False)


@contextmanager
def no_grad():
    """Disable graph construction (forward-only evaluation)."""
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextmanager
def finite_check():
    """Raise if any primitive produces a non-finite value (gradcheck mode)."""
    prev = _finite_enabled()
    _state.finite = True
    try:
        yield
    finally:
        _state.finite = prev


class Tensor:
    """N-dimensional float64 array participating in a gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._done = False

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents, backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._done = False
        if _finite_enabled() and not np.all(np.isfinite(data)):
            raise FloatingPointError("non-finite value produced by a primitive")
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy() if g.base is not None or g.dtype != DTYPE else g
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar root; populates leaf ``grad``s."""
        if self.data.size != 1:
            raise ValueError("backward requires a scalar root")
        if not self.requires_grad:
            raise ValueError("root is detached from any grad-requiring leaf")
        if self._done:
            raise RuntimeError("backward already ran on this graph; rebuild it first")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                # release the closure and intermediate grad buffers eagerly
                node._backward = None
                node._parents = ()
                node.grad = None
                node._done = True
        self._done = True

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- convenience ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=DTYPE))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._from_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._from_op(a.data / b.data, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(-g)

    return Tensor._from_op(-a.data, (a,), backward)


def power(a, p: float) -> Tensor:
    a = _as_tensor(a)
    p = float(p)
    out_data = a.data**p

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * p * a.data ** (p - 1.0))

    return Tensor._from_op(out_data, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return Tensor._from_op(out_data, (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return Tensor._from_op(np.log(a.data), (a,), backward)


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data)

    return Tensor._from_op(out_data, (a,), backward)


def clamp(a, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; gradient passes only through the un-clipped region."""
    a = _as_tensor(a)
    out_data = np.clip(a.data, lo, hi)
    inside = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * inside)

    return Tensor._from_op(out_data, (a,), backward)


# -- shape manipulation --------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.shape

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old))

    return Tensor._from_op(a.data.reshape(shape), (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return Tensor._from_op(a.data.transpose(axes), (a,), backward)


def take(a, idx) -> Tensor:
    """Basic (slice/int) indexing with scatter-add backward."""
    a = _as_tensor(a)

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            ga[idx] = g
            a._accumulate(ga)

    return Tensor._from_op(a.data[idx].copy(), (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        parts = np.split(g, splits, axis=axis)
        for t, p in zip(tensors, parts):
            if t.requires_grad:
                t._accumulate(p)

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# -- reductions ----------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(_expand_reduced(g, shape, axis, keepdims)))

    return Tensor._from_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= shape[ax]

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(_expand_reduced(g, shape, axis, keepdims)) / n)

    return Tensor._from_op(a.data.mean(axis=axis, keepdims=keepdims), (a,), backward)


def tmax(a, axis=None, keepdims=False) -> Tensor:
    """Max reduction; the gradient routes to the first maximal entry."""
    a = _as_tensor(a)
    out_data = a.data.max(axis=axis, keepdims=keepdims)

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            ga = np.zeros_like(a.data)
            ga.reshape(-1)[int(a.data.argmax())] = g.reshape(-1)[0]
            a._accumulate(ga)
            return
        ia = a.data.argmax(axis=axis, keepdims=True)
        gk = g if keepdims else np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, ia, gk, axis=axis)
        a._accumulate(ga)

    return Tensor._from_op(out_data, (a,), backward)


# -- matrix multiply -----------------------------------------------------------


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    """Batched matrix product; batch extents broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner extents differ: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g @ _swap_last(b.data), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(_swap_last(a.data) @ g, b.shape))

    return Tensor._from_op(a.data @ b.data, (a, b), backward)


# -- activations ----------------------------------------------------------------


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return Tensor._from_op(np.where(mask, a.data, 0.0), (a,), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out_data = _special.expit(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out_data * (1.0 - out_data))

    return Tensor._from_op(out_data, (a,), backward)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    a = _as_tensor(a)
    cdf = 0.5 * (1.0 + _special.erf(a.data * _INV_SQRT2))

    def backward(g):
        if a.requires_grad:
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
            a._accumulate(g * (cdf + a.data * pdf))

    return Tensor._from_op(a.data * cdf, (a,), backward)


def activation(kind: str, a) -> Tensor:
    try:
        return {"relu": relu, "sigmoid": sigmoid, "gelu": gelu}[kind](a)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (g - dot))

    return Tensor._from_op(out_data, (a,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply an affine gain/bias."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            bias._accumulate(_unbroadcast(g, bias.shape))
        if x.requires_grad:
            dxhat = g * gain.data
            term = dxhat.sum(axis=-1, keepdims=True) + xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            x._accumulate((dxhat - term / n) * inv)

    return Tensor._from_op(out_data, (x, gain, bias), backward)


# -- convolution -----------------------------------------------------------------


def _pair(v):
    return tuple(v) if isinstance(v, (tuple, list)) else (int(v), int(v))


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    cols = np.empty((b, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw]
    return cols


def _col2im(cols: np.ndarray, xp_shape, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    xp = np.zeros(xp_shape, dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += cols[:, :, i, j]
    return xp


def conv2d(x, w, b=None, stride=1, padding=0, groups: int = 1) -> Tensor:
    """2-D cross-correlation. x: [B,Cin,H,W], w: [Cout,Cin/g,kh,kw], b: [Cout]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if b is not None:
        b = _as_tensor(b)
    bsz, cin, h, width = x.shape
    cout, cin_g, kh, kw = w.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if cin % groups or cout % groups:
        raise ValueError(f"channels ({cin}->{cout}) not divisible by groups={groups}")
    if cin_g != cin // groups:
        raise ValueError(f"weight expects {cin_g} input channels per group, got {cin // groups}")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (width + 2 * pw - kw) // sw + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"non-positive output extent {ho}x{wo}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    # [B, g, Cg*kh*kw, L]
    cols_g = cols.reshape(bsz, groups, cin_g * kh * kw, ho * wo)
    w_g = w.data.reshape(groups, cout // groups, cin_g * kh * kw)
    out = np.matmul(w_g[None], cols_g).reshape(bsz, cout, ho, wo)
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1)

    def backward(g):
        g_g = g.reshape(bsz, groups, cout // groups, ho * wo)
        if w.requires_grad:
            dw = np.matmul(g_g, cols_g.swapaxes(-1, -2)).sum(axis=0)
            w._accumulate(dw.reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dcols = np.matmul(w_g.swapaxes(-1, -2)[None], g_g)
            dxp = _col2im(dcols.reshape(bsz, cin, kh, kw, ho, wo), xp.shape, kh, kw, sh, sw, ho, wo)
            dx = dxp[:, :, ph : ph + h, pw : pw + width] if ph or pw else dxp
            x._accumulate(np.ascontiguousarray(dx))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, backward)


def conv_transpose2d(x, w, b=None, stride=1, padding=0) -> Tensor:
    """Fractionally-strided convolution, the exact adjoint of :func:`conv2d`.

    x: [B,Cin,H,W], w: [Cin,Cout,kh,kw] (the conv2d weight viewed from the
    other side, so the same array satisfies the adjoint identity).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if b is not None:
        b = _as_tensor(b)
    bsz, cin, h, width = x.shape
    wcin, cout, kh, kw = w.shape
    if wcin != cin:
        raise ValueError(f"weight expects {wcin} input channels, got {cin}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    ho = (h - 1) * sh - 2 * ph + kh
    wo = (width - 1) * sw - 2 * pw + kw
    if ho <= 0 or wo <= 0:
        raise ValueError(f"non-positive output extent {ho}x{wo}")

    x_flat = x.data.reshape(bsz, cin, h * width)
    w_flat = w.data.reshape(cin, cout * kh * kw)
    # scatter every input position's kernel stamp into the padded output
    cols = np.matmul(w_flat.T[None], x_flat).reshape(bsz, cout, kh, kw, h, width)
    outp = _col2im(cols, (bsz, cout, ho + 2 * ph, wo + 2 * pw), kh, kw, sh, sw, h, width)
    out = outp[:, :, ph : ph + ho, pw : pw + wo] if ph or pw else outp
    out = np.ascontiguousarray(out)
    if b is not None:
        out += b.data.reshape(1, cout, 1, 1)

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else g
        gcols = _im2col(gp, kh, kw, sh, sw, h, width).reshape(bsz, cout * kh * kw, h * width)
        if x.requires_grad:
            x._accumulate(np.matmul(w_flat[None], gcols).reshape(x.shape))
        if w.requires_grad:
            dw = np.matmul(x_flat, gcols.swapaxes(-1, -2)).sum(axis=0)
            w._accumulate(dw.reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, backward)


# -- resampling -------------------------------------------------------------------


@functools.lru_cache(maxsize=128)
def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic [n_out, n_in] bilinear map with half-pixel centers."""
    r = np.zeros((n_out, n_in), dtype=DTYPE)
    src = (np.arange(n_out, dtype=DTYPE) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    f = src - i0
    rows = np.arange(n_out)
    np.add.at(r, (rows, i0), 1.0 - f)
    np.add.at(r, (rows, i1), f)
    return r


def interpolate_bilinear(x, target_h: int, target_w: int) -> Tensor:
    """Resize [B,C,H,W] spatially; identity (bit-exact) when sizes match."""
    x = _as_tensor(x)
    if target_h < 1 or target_w < 1:
        raise ValueError("target extents must be >= 1")
    _, _, h, w = x.shape
    ry = _resize_matrix(h, target_h)
    rx = _resize_matrix(w, target_w)
    out = np.matmul(np.matmul(ry, x.data), rx.T)

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.matmul(np.matmul(ry.T, g), rx))

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward)


# -- pooling ----------------------------------------------------------------------


def pool(kind: str, x) -> Tensor:
    """global_avg: [B,C,H,W]->[B,C]; channel_avg/max: [B,C,H,W]->[B,1,H,W]."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ValueError("pool expects a [B,C,H,W] tensor")
    if x.shape[2] == 0 or x.shape[3] == 0:
        raise ValueError("empty spatial extent")
    if kind == "global_avg":
        return tmean(x, axis=(2, 3))
    if kind == "channel_avg":
        return tmean(x, axis=1, keepdims=True)
    if kind == "channel_max":
        return tmax(x, axis=1, keepdims=True)
    raise ValueError(f"unknown pool kind {kind!r}")
