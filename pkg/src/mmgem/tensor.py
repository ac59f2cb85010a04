"""Dense-tensor kernels with reverse-mode automatic differentiation.

Tensors are immutable numpy-backed values (f32 for training, f64 for
gradient-check mode). Differentiable ops executed inside a ``Tape`` context
are recorded as a Wengert list; ``backward`` replays it in reverse and
accumulates into ``Parameter.grad`` until cleared.

Broadcasting is restricted to leading-batch alignment: two operands must
either share a shape or the smaller shape must equal a trailing suffix of
the larger one. Anything else requires an explicit reshape.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

LN_EPS = 1e-5
_MASK_NEG = -1e9  # additive attention mask; large but finite so the
                  # non-finite guard stays meaningful

FLOAT_DTYPES = (np.float32, np.float64)


class TensorError(Exception):
    """Base class for kernel errors."""


class ShapeError(TensorError):
    pass


class DTypeError(TensorError):
    pass


class NonFiniteError(TensorError):
    """An op produced NaN/Inf; surfaced instead of propagated."""


class ZeroNormError(TensorError):
    pass


# ---------------------------------------------------------------------------
# Tape machinery

_ACTIVE: list = []  # stack of Tape | None (None = recording suspended)


class Tape:
    """Ordered record of executed differentiable ops (a Wengert list)."""

    def __init__(self):
        self.entries = []  # (out, inputs, vjp)

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        popped = _ACTIVE.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.entries)


class no_grad:
    """Suspend recording inside the current tape context."""

    def __enter__(self):
        _ACTIVE.append(None)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False


def _current_tape():
    return _ACTIVE[-1] if _ACTIVE else None


class Tensor:
    """Immutable row-major dense tensor (f32 or f64)."""

    __slots__ = ("data", "_rg", "_tape")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.float16:
                arr = arr.astype(np.float32)
            else:
                raise DTypeError(f"unsupported dtype {arr.dtype}")
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self._rg = False
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        """Read-only view of the underlying buffer."""
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


class Parameter(Tensor):
    """Named trainable leaf with a persistent gradient accumulator."""

    __slots__ = ("name", "grad", "trainable", "no_decay")

    def __init__(self, name, data, dtype=None, trainable=True, no_decay=False):
        super().__init__(data, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.trainable = trainable
        self.no_decay = no_decay
        self._rg = trainable

    def set_trainable(self, flag):
        self.trainable = bool(flag)
        self._rg = bool(flag)

    def zero_grad(self):
        self.grad[...] = 0.0

    def assign(self, arr):
        """Replace the value in place (optimizer use, between tapes)."""
        arr = np.asarray(arr, dtype=self.data.dtype)
        if arr.shape != self.data.shape:
            raise ShapeError(f"assign shape {arr.shape} != {self.data.shape}")
        self.data[...] = arr

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def tensor(data, dtype=np.float32):
    return Tensor(data, dtype=dtype)


def _chk(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {op}")
    return arr


def _record(out, inputs, vjp):
    tape = _current_tape()
    if tape is not None and any(t._rg for t in inputs):
        out._rg = True
        out._tape = tape
        tape.entries.append((out, inputs, vjp))
    return out


def backward(loss):
    """Accumulate d(loss)/d(param) into every reachable Parameter.grad.

    Gradients add up across calls until ``Parameter.zero_grad``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward on non-scalar of shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if isinstance(loss, Parameter):
            loss.grad += np.ones_like(loss.data)
            return
        raise TensorError("backward on a tensor not produced under a Tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for out, inputs, vjp in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, vjp(g)):
            if gi is None or not t._rg:
                continue
            if isinstance(t, Parameter):
                t.grad += gi
            else:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi


# ---------------------------------------------------------------------------
# shape/broadcast helpers

def _same_dtype(a, b, op):
    if a.data.dtype != b.data.dtype:
        raise DTypeError(f"{op}: mixed dtypes {a.data.dtype} vs {b.data.dtype}")


def _suffix_ok(big, small):
    n = len(small)
    return n == 0 or (n <= len(big) and tuple(big[len(big) - n:]) == tuple(small))


def _ew_shapes(a, b, op):
    """Validate the leading-batch broadcast rule; return reduce-axes per side."""
    sa, sb = a.shape, b.shape
    if sa == sb:
        return None, None
    if _suffix_ok(sa, sb):
        return None, tuple(range(len(sa) - len(sb)))
    if _suffix_ok(sb, sa):
        return tuple(range(len(sb) - len(sa))), None
    raise ShapeError(f"{op}: shapes {sa} and {sb} are not suffix-aligned")


def _unbroadcast(g, axes):
    if axes is None:
        return g
    return g.sum(axis=axes) if axes else g


# ---------------------------------------------------------------------------
# elementwise kernels

def add(a, b):
    _same_dtype(a, b, "add")
    ra, rb = _ew_shapes(a, b, "add")
    out = Tensor(_chk(a.data + b.data, "add"))

    def vjp(g):
        return _unbroadcast(g, ra), _unbroadcast(g, rb)

    return _record(out, (a, b), vjp)


def sub(a, b):
    _same_dtype(a, b, "sub")
    ra, rb = _ew_shapes(a, b, "sub")
    out = Tensor(_chk(a.data - b.data, "sub"))

    def vjp(g):
        return _unbroadcast(g, ra), _unbroadcast(-g, rb)

    return _record(out, (a, b), vjp)


def mul(a, b):
    if isinstance(b, (int, float)):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    _same_dtype(a, b, "mul")
    ra, rb = _ew_shapes(a, b, "mul")
    out = Tensor(_chk(a.data * b.data, "mul"))
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ra), _unbroadcast(g * ad, rb)

    return _record(out, (a, b), vjp)


def div(a, b):
    _same_dtype(a, b, "div")
    ra, rb = _ew_shapes(a, b, "div")
    out = Tensor(_chk(a.data / b.data, "div"))
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g / bd, ra), _unbroadcast(-g * ad / (bd * bd), rb)

    return _record(out, (a, b), vjp)


def neg(a):
    out = Tensor(-a.data)

    def vjp(g):
        return (-g,)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# structural kernels

def matmul(a, b):
    """Matrix product: 2D@2D, batched 3D@3D, or 3D@2D (shared weight)."""
    _same_dtype(a, b, "matmul")
    na, nb = a.data.ndim, b.data.ndim
    if (na, nb) not in ((2, 2), (3, 3), (3, 2)):
        raise ShapeError(f"matmul: unsupported ranks {na}x{nb}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")
    if (na, nb) == (3, 3) and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch dims {a.shape[0]} != {b.shape[0]}")
    out = Tensor(_chk(np.matmul(a.data, b.data), "matmul"))
    ad, bd = a.data, b.data

    def vjp(g):
        if (na, nb) == (2, 2):
            return g @ bd.T, ad.T @ g
        if (na, nb) == (3, 3):
            return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g
        ga = g @ bd.T
        k = ad.shape[-1]
        gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _record(out, (a, b), vjp)


def affine(x, w, b):
    """Fused x @ w + b for 2D/3D x, 2D w, 1D b (one tape entry)."""
    _same_dtype(x, w, "affine")
    _same_dtype(x, b, "affine")
    nx = x.data.ndim
    if nx not in (2, 3) or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeError(f"affine: ranks {x.shape} @ {w.shape} + {b.shape}")
    if x.shape[-1] != w.shape[0] or b.shape[0] != w.shape[1]:
        raise ShapeError(f"affine: dims {x.shape} @ {w.shape} + {b.shape}")
    out = Tensor(_chk(np.matmul(x.data, w.data) + b.data, "affine"))
    xd, wd = x.data, w.data
    d, k = w.shape

    def vjp(g):
        gx = np.matmul(g, wd.T)
        gw = xd.reshape(-1, d).T @ g.reshape(-1, k)
        gb = g.reshape(-1, k).sum(axis=0)
        return gx, gw, gb

    return _record(out, (x, w, b), vjp)


def reshape(a, shape):
    out = Tensor(a.data.reshape(shape))
    orig = a.shape

    def vjp(g):
        return (g.reshape(orig),)

    return _record(out, (a,), vjp)


def transpose(a, axes):
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    inv = np.argsort(axes)

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _record(out, (a,), vjp)


def concat(tensors, axis=0):
    if not tensors:
        raise ShapeError("concat of zero tensors")
    d0 = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != d0:
            raise DTypeError("concat: mixed dtypes")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _record(out, tuple(tensors), vjp)


def slice_(a, key):
    """Basic slicing with a tuple of ``slice`` objects (step 1 only)."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, slice) or (k.step not in (None, 1)):
            raise ShapeError("slice_: only step-1 slices are supported")
    out = Tensor(np.ascontiguousarray(a.data[key]))
    shape = a.shape

    def vjp(g):
        z = np.zeros(shape, dtype=g.dtype)
        z[key] += g
        return (z,)

    return _record(out, (a,), vjp)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.data.ndim)
    out = Tensor(_chk(a.data.mean(axis=axes, keepdims=keepdims), "mean"))
    shape = a.shape
    count = 1
    for ax in axes:
        count *= shape[ax]

    def vjp(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        return (np.broadcast_to(gg, shape).astype(g.dtype) / count,)

    return _record(out, (a,), vjp)


def sum_(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.data.ndim)
    out = Tensor(_chk(a.data.sum(axis=axes, keepdims=keepdims), "sum"))
    shape = a.shape

    def vjp(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        return (np.broadcast_to(gg, shape).astype(g.dtype).copy(),)

    return _record(out, (a,), vjp)


def tile0(a, n):
    """Stack n copies along a new leading axis: shape (..) -> (n, ..)."""
    if n < 1:
        raise ShapeError(f"tile0: n must be >= 1, got {n}")
    out = Tensor(np.broadcast_to(a.data, (n,) + a.shape).copy())

    def vjp(g):
        return (g.sum(axis=0),)

    return _record(out, (a,), vjp)


def embedding(table, ids):
    """Row lookup: table (V, D) gathered by an integer id array."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding: id out of range")
    out = Tensor(table.data[ids])
    vshape = table.shape
    d = vshape[-1]

    def vjp(g):
        gt = np.zeros(vshape, dtype=g.dtype)
        np.add.at(gt, ids.ravel(), g.reshape(-1, d))
        return (gt,)

    return _record(out, (table,), vjp)


def gather_rows(a, idx):
    """a (B, T, D) gathered at per-sample positions idx (B,) -> (B, D)."""
    idx = np.asarray(idx)
    if a.data.ndim != 3 or idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"gather_rows: got {a.shape} and idx {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ShapeError("gather_rows: index out of range")
    b = a.shape[0]
    rows = np.arange(b)
    out = Tensor(a.data[rows, idx])
    shape = a.shape

    def vjp(g):
        z = np.zeros(shape, dtype=g.dtype)
        np.add.at(z, (rows, idx), g)
        return (z,)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# nonlinear kernels

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact (erf-based) GELU."""
    x = a.data
    e = erf(x * _INV_SQRT2)
    out = Tensor(_chk(0.5 * x * (1.0 + e), "gelu"))

    def vjp(g):
        local = 0.5 * (1.0 + e) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * local,)

    return _record(out, (a,), vjp)


def layer_norm(a, gain, bias, eps=LN_EPS):
    """Normalize the last axis, then apply the affine (gain, bias)."""
    _same_dtype(a, gain, "layer_norm")
    _same_dtype(a, bias, "layer_norm")
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gain.shape}/{bias.shape} "
                         f"vs feature dim {d}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(_chk(xhat * gain.data + bias.data, "layer_norm"))
    gd = gain.data

    def vjp(g):
        gy = g * gd
        m1 = gy.mean(axis=-1, keepdims=True)
        m2 = (gy * xhat).mean(axis=-1, keepdims=True)
        gx = (gy - m1 - xhat * m2) * inv
        red = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _record(out, (a, gain, bias), vjp)


def softmax(a):
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(_chk(s, "softmax"))

    def vjp(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (a,), vjp)


def log_softmax(a):
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = Tensor(_chk(z - lse, "log_softmax"))
    s = np.exp(z - lse)

    def vjp(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _record(out, (a,), vjp)


def l2_normalize(a):
    """Scale the last axis to unit L2 norm. Zero-norm rows are an error."""
    x = a.data
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        raise ZeroNormError("l2_normalize: zero-norm input")
    y = x / norms
    out = Tensor(_chk(y, "l2_normalize"))

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - y * dot) / norms,)

    return _record(out, (a,), vjp)


def softmax_cross_entropy(logits, targets):
    """Per-row loss logsumexp(logits) - logits[target] (max-subtracted)."""
    t = np.asarray(targets)
    if not np.issubdtype(t.dtype, np.integer):
        raise ShapeError("softmax_cross_entropy: integer targets required")
    if t.shape != logits.shape[:-1]:
        raise ShapeError(f"softmax_cross_entropy: targets {t.shape} vs "
                         f"logits {logits.shape}")
    k = logits.shape[-1]
    if t.size and (t.min() < 0 or t.max() >= k):
        raise ShapeError("softmax_cross_entropy: target out of range")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True)) + m
    picked = np.take_along_axis(x, t[..., None], axis=-1)
    out = Tensor(_chk((lse - picked)[..., 0], "softmax_cross_entropy"))
    s = np.exp(x - lse)

    def vjp(g):
        gg = s * g[..., None]
        np.subtract.at(gg, (*np.indices(t.shape), t), g)
        return (gg,)

    return _record(out, (logits,), vjp)


_MASK_CACHE = {}


def attention_mask(t, dtype=np.float32):
    """Additive causal mask (t, t): 0 on/below diagonal, large negative above."""
    key = (t, np.dtype(dtype).str)
    cached = _MASK_CACHE.get(key)
    if cached is None:
        m = np.zeros((t, t), dtype=dtype)
        m[np.triu_indices(t, k=1)] = _MASK_NEG
        cached = _MASK_CACHE[key] = Tensor(m)
    return cached
