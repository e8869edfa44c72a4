"""Fast-weight blocks: adapt on edit tokens, apply to both token streams.

Each block holds frozen (slow) projection heads and a small fast network
f_W whose weights are re-learned at edit time by a few Muon steps on the
key -> value reconstruction loss. The image stream and the voxel-latent
stream share f_W, the output projection and the MLP; they differ only in
which query head feeds f_W.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from ..lrm.model import ImageTokens
from ..tensor.engine import (Tensor, grad_of, matmul, scatter_add_rows,
                             swiglu_mlp, take_rows, tmean, tsum)
from ..tensor.nn import (LayerNorm, Linear, Module, MultiHeadAttention,
                         Parameter, SwiGLU)
from .muon import muon_step

FAST_MODES = ("swiglu", "linear")


def fast_apply(fast, q, mode):
    if mode == "swiglu":
        return swiglu_mlp(q, fast[0], fast[1], fast[2])
    return matmul(q, fast[0])


class TTTBlock(Module):
    """Slow heads + learned initial fast weights for one refinement layer.

    fast_mode "swiglu" gives f_W = down(silu(gate x) * (up x)); "linear" is
    the single-matrix probe configuration used by the hand-run tests.
    """

    def __init__(self, rng, dim, fast_hidden=None, fast_mode="swiglu",
                 fast_scale=0.02):
        if fast_mode not in FAST_MODES:
            raise ValueError(f"fast_mode must be one of {FAST_MODES}")
        self.dim = dim
        self.fast_mode = fast_mode
        hidden = fast_hidden or dim
        self.norm = LayerNorm(dim)
        self.wk = Linear(rng, dim, dim, bias=False)
        self.wv = Linear(rng, dim, dim, bias=False)
        self.wq = Linear(rng, dim, dim, bias=False)
        self.wqv = Linear(rng, dim, dim, bias=False)
        self.out = Linear(rng, dim, dim)
        self.norm2 = LayerNorm(dim)
        self.mlp = SwiGLU(rng, dim, 4 * dim)
        if fast_mode == "swiglu":
            self.fast_init = [
                Parameter((rng.standard_normal((dim, hidden)) * fast_scale).astype(np.float32)),
                Parameter((rng.standard_normal((dim, hidden)) * fast_scale).astype(np.float32)),
                Parameter((rng.standard_normal((hidden, dim)) * fast_scale).astype(np.float32)),
            ]
        else:
            self.fast_init = [
                Parameter((rng.standard_normal((dim, dim)) * fast_scale).astype(np.float32)),
            ]

    def fast_start(self, train=False):
        """Fresh fast weights at W0: the live Parameters when training (so
        meta-gradients reach them), detached copies otherwise."""
        if train:
            return list(self.fast_init)
        return [Tensor(p.data.copy(), requires_grad=True) for p in self.fast_init]


def adapt(block, tokens, muon, fast=None, train=False):
    """Muon inner loop on mean |f_W(W_k x) - W_v x|^2 over the edit tokens.

    Returns (new fast weights, loss trace of length steps + 1). The loss is
    evaluated before every step and once after the last, so trace[0] is the
    pre-adaptation loss.
    """
    x = tokens.tokens if isinstance(tokens, ImageTokens) else tokens
    if x.data.shape[0] == 0:
        raise ValueError("adapt needs at least one edit token")
    if not train:
        x = Tensor(x.data)
    k = block.wk(x)
    v = block.wv(x)
    fast = list(block.fast_start(train) if fast is None else fast)
    # leaves must be marked differentiable or grad_of skips them
    fast = [w if (w.requires_grad or w._parents)
            else Tensor(w.data, requires_grad=True) for w in fast]
    muon.reset(fast)

    def loss_of(weights):
        d = fast_apply(weights, k, block.fast_mode) - v
        return tmean(tsum(d * d, axis=1))

    trace = []
    for _ in range(muon.steps):
        loss = loss_of(fast)
        trace.append(float(loss.data))
        grads = grad_of(loss, fast, create_graph=train)
        fast = muon_step(fast, grads, muon)
    trace.append(float(loss_of(fast).data))
    if not train:
        fast = [Tensor(w.data) for w in fast]
    return fast, trace


def apply_streams(block, image_tokens, latents, fast, latent_rows=None,
                  train=False):
    """Residual fast-weight update plus MLP on both streams.

    latent_rows restricts the voxel stream to a row subset; the remaining
    latent rows pass through bit-identical (assignment at inference, a
    scatter of the row delta when gradients are needed).
    """
    tok_in = image_tokens
    x = tok_in.tokens if isinstance(tok_in, ImageTokens) else tok_in

    def stream(t, head):
        t = t + block.out(fast_apply(fast, head(block.norm(t)), block.fast_mode))
        return t + block.mlp(block.norm2(t))

    x = stream(x, block.wq)
    if latent_rows is None:
        lat = stream(latents, block.wqv)
    else:
        rows = np.asarray(latent_rows, dtype=np.int64)
        sub = take_rows(latents, rows)
        sub2 = stream(sub, block.wqv)
        if train:
            lat = latents + scatter_add_rows(sub2 - sub, rows, latents.data.shape)
        else:
            merged = latents.data.copy()
            merged[rows] = sub2.data
            lat = Tensor(merged)
    if isinstance(tok_in, ImageTokens):
        x = dataclasses.replace(tok_in, tokens=x)
    return x, lat


class EditCrossAttnBlock(Module):
    """Ablation layer: latents cross-attend to edit tokens, no fast weights."""

    def __init__(self, rng, dim, n_heads):
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.attn = MultiHeadAttention(rng, dim, n_heads)
        self.norm2 = LayerNorm(dim)
        self.mlp = SwiGLU(rng, dim, 4 * dim)

    def forward(self, latents, edit_tokens, latent_rows=None):
        kv = self.norm_kv(edit_tokens)

        def update(t):
            t = t + self.attn(self.norm_q(t), x_kv=kv)
            return t + self.mlp(self.norm2(t))

        if latent_rows is None:
            return update(latents)
        rows = np.asarray(latent_rows, dtype=np.int64)
        sub2 = update(take_rows(latents, rows))
        merged = latents.data.copy()
        merged[rows] = sub2.data
        return Tensor(merged)


class TTTRefiner(Module):
    """The Stage II stack: L fast-weight blocks plus one dedicated block
    that re-decodes original Gaussians during a local merge. mode="xattn"
    swaps the fast-weight blocks for cross-attention (the ablation), run by
    the same session harness, trainer, and checkpoint code."""

    MODES = ("ttt", "xattn")

    def __init__(self, rng, dim, n_blocks=2, n_heads=4, fast_hidden=None,
                 fast_mode="swiglu", mode="ttt"):
        if mode not in self.MODES:
            raise ValueError(f"mode must be one of {self.MODES}")
        self.dim = dim
        self.mode = mode
        if mode == "ttt":
            self.blocks = [TTTBlock(rng, dim, fast_hidden, fast_mode)
                           for _ in range(n_blocks)]
            self.merge_block = TTTBlock(rng, dim, fast_hidden, fast_mode)
        else:
            self.blocks = [EditCrossAttnBlock(rng, dim, n_heads)
                           for _ in range(n_blocks)]
