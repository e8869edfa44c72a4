"""Tiny module system over the tensor engine.

Modules hold named Parameters; `named_parameters()` walks the attribute
tree in definition order, so parameter lists (and checkpoints) are stable
across runs. Weights default to fan-in scaled normal init off a caller
supplied RNG; passing the RNG explicitly keeps whole-model init a pure
function of one seed.
"""

from __future__ import annotations

import numpy as np

from .engine import (Tensor, layernorm, matmul, silu, softmax_lastdim,
                     swap_last2)


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Parameter):
                yield key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{key}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {k: np.array(p.data, copy=True) for k, p in self.named_parameters()}

    def load_state_dict(self, state):
        mine = dict(self.named_parameters())
        missing = sorted(set(mine) - set(state))
        extra = sorted(set(state) - set(mine))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} extra={extra}")
        for k, p in mine.items():
            arr = np.asarray(state[k], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.copy()

    def __call__(self, *a, **kw):
        return self.forward(*a, **kw)


def _winit(rng, fan_in, shape):
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(np.float32)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True):
        self.w = Parameter(_winit(rng, d_in, (d_in, d_out)))
        self.b = Parameter(np.zeros(d_out, dtype=np.float32)) if bias else None

    def forward(self, x):
        y = matmul(x, self.w)
        return y + self.b if self.b is not None else y


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5):
        self.gain = Parameter(np.ones(dim, dtype=np.float32))
        self.bias = Parameter(np.zeros(dim, dtype=np.float32))
        self.eps = eps

    def forward(self, x):
        return layernorm(x, self.gain, self.bias, self.eps)


class SwiGLU(Module):
    """Gated MLP: down( silu(gate(x)) * up(x) )."""

    def __init__(self, rng, dim, hidden):
        self.gate = Linear(rng, dim, hidden, bias=False)
        self.up = Linear(rng, dim, hidden, bias=False)
        self.down = Linear(rng, hidden, dim, bias=False)

    def forward(self, x):
        return self.down(silu(self.gate(x)) * self.up(x))


def split_heads(x, n_heads):
    """(..., T, D) -> (..., H, T, D/H)"""
    *lead, t, d = x.shape
    x = x.reshape(*lead, t, n_heads, d // n_heads)
    ax = list(range(x.ndim))
    ax[-3], ax[-2] = ax[-2], ax[-3]
    return x.transpose(*ax)


def merge_heads(x):
    """(..., H, T, Dh) -> (..., T, H*Dh)"""
    ax = list(range(x.ndim))
    ax[-3], ax[-2] = ax[-2], ax[-3]
    x = x.transpose(*ax)
    *lead, t, h, dh = x.shape
    return x.reshape(*lead, t, h * dh)


def scaled_dot_attention(q, k, v, bias=None):
    """softmax(q kᵀ / sqrt(d)) v over the last two axes; batched in front."""
    d = q.shape[-1]
    logits = matmul(q, swap_last2(k)) * (1.0 / np.sqrt(d))
    if bias is not None:
        logits = logits + bias
    return matmul(softmax_lastdim(logits), v)


class MultiHeadAttention(Module):
    """Standard QKV attention; query and context sets may differ."""

    def __init__(self, rng, dim, n_heads):
        assert dim % n_heads == 0
        self.n_heads = n_heads
        self.wq = Linear(rng, dim, dim, bias=False)
        self.wk = Linear(rng, dim, dim, bias=False)
        self.wv = Linear(rng, dim, dim, bias=False)
        self.wo = Linear(rng, dim, dim, bias=False)

    def forward(self, x_q, x_kv=None, bias=None):
        if x_kv is None:
            x_kv = x_q
        q = split_heads(self.wq(x_q), self.n_heads)
        k = split_heads(self.wk(x_kv), self.n_heads)
        v = split_heads(self.wv(x_kv), self.n_heads)
        return self.wo(merge_heads(scaled_dot_attention(q, k, v, bias)))


class TransformerBlock(Module):
    """Pre-norm self-attention + SwiGLU MLP with residuals."""

    def __init__(self, rng, dim, n_heads, mlp_hidden=None):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, n_heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = SwiGLU(rng, dim, mlp_hidden or 4 * dim)

    def forward(self, x, bias=None):
        x = x + self.attn(self.norm1(x), bias=bias)
        return x + self.mlp(self.norm2(x))
