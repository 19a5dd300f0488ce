"""Dense float64 arrays with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`GradientRecord` when any
input requires a gradient. Outside a ``with GradientRecord():`` block nothing
is recorded, which is how evaluation runs.

    with GradientRecord() as tape:
        loss = da.sum(da.relu(da.linear(x, w, b)))
    da.backward(tape, loss)
    w.grad  # d loss / d w
"""
from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from dmfnet.errors import NonFiniteError, ShapeError

_ACTIVE: contextvars.ContextVar = contextvars.ContextVar("dmfnet_tape", default=None)

LAYER_NORM_EPS = 1e-5


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def check_finite(self, what="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"{what} contains non-finite values")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named learnable leaf; ``grad`` starts at zero and accumulates."""

    __slots__ = ("name",)

    def __init__(self, name, value):
        super().__init__(value, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Entry:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable
    forward: Callable


@dataclass
class GradientRecord:
    """Ordered list of primitive applications, in execution (topological) order."""

    entries: list = field(default_factory=list)

    def __enter__(self):
        self._token = _ACTIVE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.reset(self._token)
        return False

    def __len__(self):
        return len(self.entries)

    def replay(self):
        """Re-run every entry from its leaves; True when all outputs match bit-exactly."""
        values = {}
        for e in self.entries:
            args = [values.get(id(t), t.data) for t in e.inputs]
            out = e.forward(*args)
            if out.shape != e.output.data.shape or not np.array_equal(out, e.output.data):
                return False
            values[id(e.output)] = out
        return True


def _record(op, inputs, out_data, backward, forward):
    out = Tensor(out_data)
    tape = _ACTIVE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.entries.append(Entry(op, tuple(inputs), out, backward, forward))
    return out


def backward(record: GradientRecord, loss: Tensor):
    """Accumulate d loss / d leaf into ``.grad`` of every leaf that requires it."""
    if loss.size != 1:
        raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
    produced = {id(e.output) for e in record.entries}
    if id(loss) not in produced:
        raise ValueError("loss was not produced by this gradient record")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for e in reversed(record.entries):
        g = grads.pop(id(e.output), None)
        if g is None:
            continue
        for t, gi in zip(e.inputs, e.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if key not in produced:
                leaves[key] = t
    for key, t in leaves.items():
        g = grads[key]
        t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
                   np.add)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
                   np.subtract)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _record("mul", (a, b), a.data * b.data,
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                   np.multiply)


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    return _record("scale", (x,), x.data * c, lambda g: (g * c,), lambda a: a * c)


def relu(x):
    x = as_tensor(x)
    return _record("relu", (x,), np.maximum(x.data, 0.0),
                   lambda g: (g * (x.data > 0.0),), lambda a: np.maximum(a, 0.0))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record("tanh", (x,), out, lambda g: (g * (1.0 - out * out),), np.tanh)


def row_norm(x):
    """Euclidean norm over the last axis; gradient is zero where the norm is zero."""
    x = as_tensor(x)

    def fwd(a):
        return np.sqrt(np.sum(a * a, axis=-1))

    out = fwd(x.data)

    def bwd(g):
        safe = np.where(out > 0.0, out, 1.0)
        return (np.where(out > 0.0, g / safe, 0.0)[..., None] * x.data,)

    return _record("row_norm", (x,), out, bwd, fwd)


def sq_norm(x):
    """Squared Euclidean norm over the last axis."""
    x = as_tensor(x)

    def fwd(a):
        return np.sum(a * a, axis=-1)

    return _record("sq_norm", (x,), fwd(x.data), lambda g: (2.0 * g[..., None] * x.data,), fwd)


# reductions ----------------------------------------------------------------

def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    x = as_tensor(x)

    def fwd(a):
        return np.sum(a, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", (x,), fwd(x.data), bwd, fwd)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def max_over_axis(x, axis):
    """Values and argmax along ``axis``; ties go to the smallest index."""
    x = as_tensor(x)
    axis = axis % x.ndim
    if x.shape[axis] == 0:
        raise ShapeError("max over an empty axis")
    arg = np.argmax(x.data, axis=axis)
    idx = np.expand_dims(arg, axis)

    def fwd(a):
        return np.take_along_axis(a, idx, axis=axis).squeeze(axis)

    def bwd(g):
        out = np.zeros(x.shape)
        np.put_along_axis(out, idx, np.expand_dims(g, axis), axis=axis)
        return (out,)

    return _record("max", (x,), fwd(x.data), bwd, fwd), arg


def softmax_last(x):
    x = as_tensor(x)

    def fwd(a):
        e = np.exp(a - a.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    out = fwd(x.data)

    def bwd(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _record("softmax", (x,), out, bwd, fwd)


# shape ---------------------------------------------------------------------

def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    return _record("reshape", (x,), x.data.reshape(shape),
                   lambda g: (g.reshape(x.shape),), lambda a: a.reshape(shape))


def transpose(x, axes=None):
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (x,), np.transpose(x.data, axes),
                   lambda g: (np.transpose(g, inv),), lambda a: np.transpose(a, axes))


def broadcast_to(x, shape):
    x = as_tensor(x)
    shape = tuple(shape)
    return _record("broadcast", (x,), np.broadcast_to(x.data, shape).copy(),
                   lambda g: (_unbroadcast(g, x.shape),),
                   lambda a: np.broadcast_to(a, shape).copy())


def concat(xs: Sequence, axis=0):
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of an empty list")
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(
                x.shape[d] != ref[d] for d in range(len(ref)) if d != ax):
            raise ShapeError(f"concat side dimensions differ: {ref} vs {x.shape}")
    offsets = np.cumsum([0] + [x.shape[ax] for x in xs])

    def bwd(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=ax)
                     for i in range(len(xs)))

    return _record("concat", tuple(xs), np.concatenate([x.data for x in xs], axis=ax), bwd,
                   lambda *a: np.concatenate(a, axis=ax))


def take_slice(x, start, stop, axis=0):
    x = as_tensor(x)
    ax = axis % x.ndim
    sl = (slice(None),) * ax + (slice(start, stop),)

    def bwd(g):
        out = np.zeros(x.shape)
        out[sl] = g
        return (out,)

    return _record("slice", (x,), x.data[sl].copy(), bwd, lambda a: a[sl].copy())


def split(x, sizes, axis=0):
    offsets = np.cumsum([0] + list(sizes))
    if offsets[-1] != x.shape[axis]:
        raise ShapeError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    return [take_slice(x, offsets[i], offsets[i + 1], axis) for i in range(len(sizes))]


def take(x, idx):
    """Gather rows: out[...] = x[idx[...]] along axis 0."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        out = np.zeros(x.shape)
        np.add.at(out, idx.reshape(-1), g.reshape((-1,) + x.shape[1:]))
        return (out,)

    return _record("take", (x,), x.data[idx], bwd, lambda a: a[idx])


def repeat_rows(x, r):
    """Row i of ``x`` becomes rows r*i .. r*i+r-1."""
    x = as_tensor(x)
    return take(x, np.repeat(np.arange(x.shape[0]), r))


def replicate(row, n):
    """Stack a single row ``n`` times."""
    row = as_tensor(row)
    if row.ndim == 1:
        row = reshape(row, (1, -1))
    return take(row, np.zeros(n, dtype=np.int64))


# linear algebra ------------------------------------------------------------

def _swap(a):
    return np.swapaxes(a, -1, -2)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} and {b.shape}")

    def bwd(g):
        return (_unbroadcast(g @ _swap(b.data), a.shape), _unbroadcast(_swap(a.data) @ g, b.shape))

    return _record("matmul", (a, b), np.matmul(a.data, b.data), bwd, np.matmul)


def linear(x, w, b=None):
    """Affine map applied identically to every leading-index row (a shared MLP layer)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    lead = x.shape[:-1]
    cin, cout = w.shape

    def fwd(a, wd, bd=None):
        out = a.reshape(-1, cin) @ wd
        if bd is not None:
            out = out + bd
        return out.reshape(lead + (cout,))

    def bwd(g):
        g2 = g.reshape(-1, cout)
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x.data.reshape(-1, cin).T @ g2
        return (gx, gw) if b is None else (gx, gw, g2.sum(axis=0))

    if b is None:
        return _record("linear", (x, w), fwd(x.data, w.data), bwd, fwd)
    b = as_tensor(b)
    if b.shape != (cout,):
        raise ShapeError(f"linear: bias shape {b.shape} != ({cout},)")
    return _record("linear", (x, w, b), fwd(x.data, w.data, b.data), bwd, fwd)


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS):
    """Normalize the last axis to zero mean, unit variance (+eps), then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]

    def fwd(a, gd, bd):
        mu = a.mean(axis=-1, keepdims=True)
        c = a - mu
        var = (c * c).mean(axis=-1, keepdims=True)
        return c / np.sqrt(var + eps) * gd + bd

    mu = x.data.mean(axis=-1, keepdims=True)
    c = x.data - mu
    inv = 1.0 / np.sqrt((c * c).mean(axis=-1, keepdims=True) + eps)
    xhat = c * inv

    def bwd(g):
        gh = g * gain.data
        gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True)
                        - xhat * np.sum(gh * xhat, axis=-1, keepdims=True))
        red = tuple(range(x.ndim - 1))
        return gx, np.sum(g * xhat, axis=red), np.sum(g, axis=red)

    return _record("layer_norm", (x, gain, bias), fwd(x.data, gain.data, bias.data), bwd, fwd)


def _conv_geometry(h, w, k, stride):
    pad = (k - 1) // 2 if stride == 1 else 0
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    return pad, ho, wo


def conv2d(x, w, stride=1):
    """Cross-correlation of an H x W x Cin image with a k x k x Cin x Cout kernel.

    Stride 1 pads with zeros to keep the spatial size; larger strides use no
    padding.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4 or w.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d expects HxWxC input and kxkxCinxCout kernel, got {x.shape}, {w.shape}")
    if x.shape[2] != w.shape[2]:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape[2]}, kernel {w.shape[2]}")
    k = w.shape[0]
    h, wd_, cin = x.shape
    if h < k or wd_ < k:
        raise ShapeError(f"conv2d: image {h}x{wd_} smaller than kernel {k}")
    pad, ho, wo = _conv_geometry(h, wd_, k, stride)
    cout = w.shape[3]

    def fwd(a, kern):
        ap = np.pad(a, ((pad, pad), (pad, pad), (0, 0))) if pad else a
        out = np.zeros((ho, wo, cout))
        for i in range(k):
            for j in range(k):
                patch = ap[i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :]
                out += patch @ kern[i, j]
        return out

    def bwd(g):
        ap = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
        gxp = np.zeros(ap.shape)
        gw = np.zeros(w.shape)
        g2 = g.reshape(-1, cout)
        for i in range(k):
            for j in range(k):
                rs = slice(i, i + stride * (ho - 1) + 1, stride)
                cs = slice(j, j + stride * (wo - 1) + 1, stride)
                gw[i, j] = ap[rs, cs, :].reshape(-1, cin).T @ g2
                gxp[rs, cs, :] += g @ w.data[i, j].T
        gx = gxp[pad:pad + h, pad:pad + wd_, :] if pad else gxp
        return gx, gw

    return _record("conv2d", (x, w), fwd(x.data, w.data), bwd, fwd)


def transpose_conv1d(x, r, w, b=None):
    """Non-overlapping 1-d transpose convolution (kernel = stride = r).

    ``w`` has shape (cin, r * cout); output row r*i + j depends only on input
    row i.
    """
    if r < 1:
        raise ValueError(f"upsample ratio must be >= 1, got {r}")
    x, w = as_tensor(x), as_tensor(w)
    if w.shape[1] % r:
        raise ShapeError(f"transpose_conv1d weight width {w.shape[1]} not divisible by r={r}")
    cout = w.shape[1] // r
    y = linear(x, w)
    y = reshape(y, (x.shape[0] * r, cout))
    if b is not None:
        y = add(y, b)
    return y


def attention_heads(q, k, v, heads):
    """Per-head scaled dot-product attention on already projected q, k, v (n x d)."""
    n, d = q.shape
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    dh = d // heads

    def split_heads(t):
        return transpose(reshape(t, (t.shape[0], heads, dh)), (1, 0, 2))

    qh, kh, vh = split_heads(q), split_heads(k), split_heads(v)
    logits = scale(matmul(qh, transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(dh))
    att = softmax_last(logits)
    out = matmul(att, vh)
    return reshape(transpose(out, (1, 0, 2)), (n, d))


def multi_head_attention(q, k, v, heads, wq, wk, wv, wo):
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] % heads:
        raise ShapeError(f"width {q.shape[-1]} not divisible by {heads} heads")
    return linear(attention_heads(linear(q, wq), linear(k, wk), linear(v, wv), heads), wo)
