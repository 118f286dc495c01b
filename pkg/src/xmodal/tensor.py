"""Dense tensors with reverse-mode automatic differentiation.

A small numpy-backed engine: every op records its parents and a backward
rule on the output tensor; ``Tensor.backward`` walks the recorded graph in
reverse topological order. Only what the embedder, transformer, predictors
and OTDD loss need is implemented.
"""
from __future__ import annotations

import contextlib
import itertools
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True
_CHECK_FINITE = False


class ShapeError(ValueError):
    """Incompatible operand shapes."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_check_finite(flag: bool) -> None:
    """Debug switch: raise on NaN/Inf in any op output."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(flag)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    # -- graph ----------------------------------------------------------
    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss is not attached to a recorded graph")
        order = _topo_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Parameter(Tensor):
    """A named, trainable tensor. ``frozen`` excludes it from optimizer steps."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name: str = "", frozen: bool = False, dtype=None):
        super().__init__(np.array(data, copy=True), requires_grad=True, dtype=dtype)
        self.name = name
        self.frozen = frozen

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


def _topo_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        return Tensor(x, dtype=_DEFAULT_DTYPE)
    return Tensor(x)


def _make(data, parents, backward) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values in op output")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _make(a.data / b.data, (a, b), bw)


def power(a, p: float):
    a = as_tensor(a)

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return _make(a.data**p, (a,), bw)


def exp(a):
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_tensor(a)
    y = np.sqrt(a.data)
    return _make(y, (a,), lambda g: (g * 0.5 / y,))


def tanh(a):
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def maximum(a, floor: float):
    """Elementwise max with a constant; gradient passes where ``a > floor``."""
    a = as_tensor(a)
    mask = a.data > floor
    return _make(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(y, (a,), bw)


# -- reductions and shape ----------------------------------------------------
def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def index(a, idx):
    """Basic/advanced indexing with scatter-add backward."""
    a = as_tensor(a)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), bw)


def stack(tensors, axis=0):
    ts = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(np.stack([t.data for t in ts], axis=axis), tuple(ts), bw)


def take_rows(a, rows):
    """``a[rows]`` along axis 0 (embedding lookup / subset selection)."""
    rows = np.asarray(rows, dtype=np.int64)
    return index(a, rows)


def pad(a, widths):
    """Zero padding; ``widths`` as for ``np.pad``."""
    a = as_tensor(a)
    widths = [tuple(w) for w in widths]
    sl = tuple(slice(lo, lo + s) for (lo, _), s in zip(widths, a.shape))
    return _make(np.pad(a.data, widths), (a,), lambda g: (g[sl],))


# -- linear algebra ----------------------------------------------------------
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), bw)


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), bw)


def layer_norm(x, gain, shift, eps: float = 1e-5):
    """Standardize over the last axis, then ``gain * xhat + shift``."""
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}, {shift.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + shift.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dshift = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dshift

    return _make(y, (x, gain, shift), bw)


def conv(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation over 1 or 2 trailing spatial dims.

    ``x``: [batch, cin, *spatial]; ``weight``: [cout, cin, *kernel];
    ``bias``: [cout] or None. Padding is symmetric zero padding.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    rank = x.ndim - 2
    if rank not in (1, 2):
        raise ShapeError(f"conv supports 1 or 2 spatial dims, got input shape {x.shape}")
    if weight.ndim != rank + 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"conv weight {weight.shape} incompatible with input {x.shape}")
    strides = (stride,) * rank if isinstance(stride, int) else tuple(stride)
    pads = (padding,) * rank if isinstance(padding, int) else tuple(padding)
    if any(s < 1 for s in strides) or any(p < 0 for p in pads):
        raise ValueError("stride must be positive and padding non-negative")
    kernel = weight.shape[2:]
    for ext, k, p in zip(x.shape[2:], kernel, pads):
        if k > ext + 2 * p:
            raise ShapeError(f"kernel {kernel} larger than padded input {x.shape[2:]}")

    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(p, p) for p in pads])
    spatial_axes = tuple(range(2, 2 + rank))
    win = sliding_window_view(xp, kernel, axis=spatial_axes)
    win = win[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in strides)]
    out_sp = win.shape[2 : 2 + rank]
    # win: [B, cin, *out, *kernel]
    kaxes = tuple(range(2 + rank, 2 + 2 * rank))
    out = np.tensordot(win, weight.data, axes=((1,) + kaxes, (1,) + tuple(range(2, 2 + rank))))
    # out: [B, *out, cout]
    out = np.moveaxis(out, -1, 1)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape((1, -1) + (1,) * rank)
        parents.append(bias)

    def bw(g):
        # g: [B, cout, *out]
        out_axes = tuple(range(2, 2 + rank))
        gw = np.tensordot(g, win, axes=((0,) + out_axes, (0,) + out_axes))
        dwin = np.tensordot(g, weight.data, axes=((1,), (0,)))
        # dwin: [B, *out, cin, *kernel]
        dxp = np.zeros_like(xp)
        for offs in itertools.product(*(range(k) for k in kernel)):
            sl = tuple(slice(o, o + s * n, s) for o, s, n in zip(offs, strides, out_sp))
            contrib = dwin[(slice(None),) + (slice(None),) * rank + (slice(None),) + offs]
            dxp[(slice(None), slice(None)) + sl] += np.moveaxis(contrib, -1, 1)
        unpad = tuple(slice(p, p + n) for p, n in zip(pads, x.shape[2:]))
        grads = [dxp[(slice(None), slice(None)) + unpad], gw]
        if bias is not None:
            grads.append(g.sum(axis=(0,) + out_axes))
        return tuple(grads)

    return _make(out, tuple(parents), bw)


def conv_output_extent(n: int, kernel: int, stride: int, padding: int = 0) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def dropout(x, rate: float, rng):
    if rate <= 0.0 or rng is None:
        return as_tensor(x)
    x = as_tensor(x)
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# -- losses -----------------------------------------------------------------
def softmax_ce(logits, target):
    """Mean cross-entropy.

    Integer ``target`` of shape [batch] selects softmax cross-entropy over
    classes; a float multi-hot ``target`` of the logits' shape selects
    per-label sigmoid binary cross-entropy (mean over all entries).
    """
    logits = as_tensor(logits)
    z = logits.data
    target = np.asarray(target)
    if np.issubdtype(target.dtype, np.integer) and target.ndim == 1:
        B, K = z.shape
        if K < 2:
            raise ShapeError("class-index cross-entropy needs at least 2 classes")
        if target.shape[0] != B:
            raise ShapeError(f"target length {target.shape[0]} vs batch {B}")
        if target.min() < 0 or target.max() >= K:
            raise IndexError(f"class index out of range for {K} classes")
        m = z.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
        loss = float(np.mean(lse - z[np.arange(B), target]))

        def bw(g):
            p = np.exp(z - lse[:, None])
            p[np.arange(B), target] -= 1.0
            return (g * p / B,)

        return _make(np.asarray(loss, dtype=z.dtype), (logits,), bw)

    if target.shape != z.shape:
        raise ShapeError(f"multi-hot target {target.shape} vs logits {z.shape}")
    t = target.astype(z.dtype)
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = per.mean()

    def bw(g):
        sig = 0.5 * (1.0 + np.tanh(0.5 * z))
        return (g * (sig - t) / z.size,)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), bw)


def mse(pred, target):
    pred = as_tensor(pred)
    t = np.asarray(target, dtype=pred.dtype)
    if t.shape != pred.shape:
        raise ShapeError(f"mse shapes {pred.shape} vs {t.shape}")
    diff = pred.data - t
    return _make(
        np.asarray((diff * diff).mean()), (pred,), lambda g: (g * 2.0 * diff / diff.size,)
    )


# -- optimizer ----------------------------------------------------------------
class AdamW:
    """Adam with decoupled weight decay. Frozen parameters are never touched."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.frozen or p.grad is None:
                continue
            st = self.state.get(id(p))
            if st is None:
                st = self.state[id(p)] = {
                    "step": 0,
                    "m": np.zeros_like(p.data),
                    "v": np.zeros_like(p.data),
                }
            st["step"] += 1
            t = st["step"]
            g = p.grad
            st["m"] = self.beta1 * st["m"] + (1.0 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1.0 - self.beta2) * g * g
            mhat = st["m"] / (1.0 - self.beta1**t)
            vhat = st["v"] / (1.0 - self.beta2**t)
            if self.weight_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)
