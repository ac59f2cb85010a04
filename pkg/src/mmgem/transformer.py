"""Shared transformer machinery: parameter store, blocks, attention.

Both the vision encoder and the language model are pre-LN transformers built
from these pieces; they differ only in the attention mask and embeddings.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T


class ParamStore:
    """Ordered name -> Parameter registry; names unique within a model."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params = {}

    def add(self, name, array, no_decay=False):
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = T.Parameter(name, np.asarray(array, dtype=self.dtype),
                        no_decay=no_decay)
        self._params[name] = p
        return p

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params.values())

    def names(self):
        return list(self._params.keys())

    def items(self):
        return self._params.items()

    def state_dict(self):
        return {k: p.data.copy() for k, p in self._params.items()}


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) redrawn outside +-2 std."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x


def init_linear(store, prefix, d_in, d_out, rng, std=0.02):
    store.add(f"{prefix}.w", trunc_normal(rng, (d_in, d_out), std))
    store.add(f"{prefix}.b", np.zeros(d_out), no_decay=True)


def linear(store, prefix, x):
    return T.affine(x, store[f"{prefix}.w"], store[f"{prefix}.b"])


def init_ln(store, prefix, dim):
    store.add(f"{prefix}.g", np.ones(dim), no_decay=True)
    store.add(f"{prefix}.b", np.zeros(dim), no_decay=True)


def ln(store, prefix, x):
    return T.layer_norm(x, store[f"{prefix}.g"], store[f"{prefix}.b"])


def init_block(store, prefix, dim, heads, rng, mlp_ratio=4):
    if dim % heads:
        raise ValueError(f"dim {dim} not divisible by heads {heads}")
    init_ln(store, f"{prefix}.ln1", dim)
    init_linear(store, f"{prefix}.attn.wq", dim, dim, rng)
    # no key bias: softmax cancels the per-query constant it would add
    store.add(f"{prefix}.attn.wk.w", trunc_normal(rng, (dim, dim)))
    init_linear(store, f"{prefix}.attn.wv", dim, dim, rng)
    init_linear(store, f"{prefix}.attn.wo", dim, dim, rng)
    init_ln(store, f"{prefix}.ln2", dim)
    init_linear(store, f"{prefix}.mlp.fc1", dim, dim * mlp_ratio, rng)
    init_linear(store, f"{prefix}.mlp.fc2", dim * mlp_ratio, dim, rng)


def _split_heads(x, heads):
    b, t, d = x.shape
    dh = d // heads
    x = T.reshape(x, (b, t, heads, dh))
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (b * heads, t, dh))


def _merge_heads(x, heads):
    bh, t, dh = x.shape
    b = bh // heads
    x = T.reshape(x, (b, heads, t, dh))
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (b, t, heads * dh))


def attention(store, prefix, x, heads, mask=None):
    """Multi-head self-attention; ``mask`` is an additive (T, T) Tensor."""
    q = _split_heads(linear(store, f"{prefix}.wq", x), heads)
    k = _split_heads(T.matmul(x, store[f"{prefix}.wk.w"]), heads)
    v = _split_heads(linear(store, f"{prefix}.wv", x), heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), scale)
    if mask is not None:
        scores = T.add(scores, mask)
    att = T.softmax(scores)
    out = _merge_heads(T.matmul(att, v), heads)
    return linear(store, f"{prefix}.wo", out)


def block(store, prefix, x, heads, mask=None):
    h = ln(store, f"{prefix}.ln1", x)
    x = T.add(x, attention(store, f"{prefix}.attn", h, heads, mask))
    h = ln(store, f"{prefix}.ln2", x)
    h = linear(store, f"{prefix}.mlp.fc1", h)
    h = T.gelu(h)
    h = linear(store, f"{prefix}.mlp.fc2", h)
    return T.add(x, h)
