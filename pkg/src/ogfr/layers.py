"""Parameter store and transformer building blocks on top of ``tensor``."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Params:
    """Ordered name -> Tensor store.

    ``decay`` holds the names that receive weight decay; ``trainable`` the
    names updated by the gradient optimizer (the agent is updated elsewhere).
    """

    def __init__(self):
        self.tensors: "OrderedDict[str, Tensor]" = OrderedDict()
        self.decay: set[str] = set()
        self.frozen: set[str] = set()

    def add(self, name, value, decay=False, trainable=True):
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        t = T.parameter(value, name=name)
        t.requires_grad = trainable
        self.tensors[name] = t
        if decay:
            self.decay.add(name)
        if not trainable:
            self.frozen.add(name)
        return t

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def trainable(self):
        return [(n, t) for n, t in self.tensors.items() if n not in self.frozen]

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def astype(self, dtype):
        for t in self.tensors.values():
            t.data = t.data.astype(dtype)
        return self

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data.copy()) for n, t in self.tensors.items())

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())


def init_linear(params, name, d_in, d_out, rng, std=None):
    """Weight ~ N(0, std^2), zero bias; ``std=None`` uses fan-in scaling 1/sqrt(d_in)."""
    std = 1.0 / math.sqrt(d_in) if std is None else std
    params.add(f"{name}.w", rng.normal(0.0, std, size=(d_in, d_out)), decay=True)
    params.add(f"{name}.b", np.zeros(d_out))


def init_norm(params, name, d):
    params.add(f"{name}.g", np.ones(d))
    params.add(f"{name}.b", np.zeros(d))


def init_attention(params, name, d, rng, std=None):
    for proj in ("q", "k", "v", "o"):
        init_linear(params, f"{name}.{proj}", d, d, rng.split(proj), std)


def init_mlp(params, name, d, hidden, rng, std=None):
    init_linear(params, f"{name}.fc1", d, hidden, rng.split("fc1"), std)
    init_linear(params, f"{name}.fc2", hidden, d, rng.split("fc2"), std)


def init_block(params, name, d, mlp_ratio, rng, std=None):
    init_norm(params, f"{name}.ln1", d)
    init_attention(params, f"{name}.attn", d, rng.split("attn"), std)
    init_norm(params, f"{name}.ln2", d)
    init_mlp(params, f"{name}.mlp", d, d * mlp_ratio, rng.split("mlp"), std)


def dense(x, params, name):
    return T.linear(x, params[f"{name}.w"], params[f"{name}.b"])


def norm(x, params, name):
    return T.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def mlp(x, params, name):
    return dense(T.gelu(dense(x, params, f"{name}.fc1")), params, f"{name}.fc2")


def _split_heads(x, heads):
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dk)


def attention(x, params, name, heads, return_weights=False):
    """Conventional multi-head self-attention over (B, T, D)."""
    q = _split_heads(dense(x, params, f"{name}.q"), heads)
    k = _split_heads(dense(x, params, f"{name}.k"), heads)
    v = _split_heads(dense(x, params, f"{name}.v"), heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    w = T.softmax(T.matmul(q, T.swap_last(k)) * scale, axis=-1)
    out = dense(_merge_heads(T.matmul(w, v)), params, f"{name}.o")
    return (out, w) if return_weights else out


def attention_fixed(x, params, name, heads, n_fixed, return_heads=False):
    """Self-attention in which only the trailing tokens attend.

    The first ``n_fixed`` rows (global + part tokens) pass through as their
    own value projections; the remaining rows query all keys and aggregate
    all values.  Per head, the fixed rows therefore depend only on the
    fixed-row inputs.
    """
    patches = x[:, n_fixed:, :]
    q = _split_heads(dense(patches, params, f"{name}.q"), heads)
    k = _split_heads(dense(x, params, f"{name}.k"), heads)
    v = _split_heads(dense(x, params, f"{name}.v"), heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    w = T.softmax(T.matmul(q, T.swap_last(k)) * scale, axis=-1)
    updated = T.matmul(w, v)
    fixed = v[:, :, :n_fixed, :]
    per_head = T.concat([fixed, updated], axis=2)
    out = dense(_merge_heads(per_head), params, f"{name}.o")
    if return_heads:
        return out, {"per_head": per_head, "fixed": fixed, "weights": w, "values": v}
    return out


def encoder_block(x, params, name, heads):
    """Pre-norm ViT block with residual connections."""
    x = x + attention(norm(x, params, f"{name}.ln1"), params, f"{name}.attn", heads)
    return x + mlp(norm(x, params, f"{name}.ln2"), params, f"{name}.mlp")


def decoder_layer(x, params, name, heads, n_fixed=None):
    """Attention -> LN -> FFN with residuals around attention and FFN.

    ``n_fixed`` switches the attention to the fixed-token variant.
    """
    if n_fixed is None:
        a = attention(x, params, f"{name}.attn", heads)
    else:
        a = attention_fixed(x, params, f"{name}.attn", heads, n_fixed)
    h = norm(x + a, params, f"{name}.ln1")
    return h + mlp(h, params, f"{name}.mlp")


def init_decoder_layer(params, name, d, mlp_ratio, rng, std=None):
    init_attention(params, f"{name}.attn", d, rng.split("attn"), std)
    init_norm(params, f"{name}.ln1", d)
    init_mlp(params, f"{name}.mlp", d, d * mlp_ratio, rng.split("mlp"), std)
