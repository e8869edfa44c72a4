"""Local voxel transformer: compress per-Gaussian tokens into K latents/voxel.

Pipeline: per-Gaussian tokens (feature ⊕ attributes, linearly projected) are
self-attended inside their voxel group (encoder), distilled to the top-K
highest-opacity slots via one cross-attention block, refined by a second
within-voxel stack (decoder), and mapped back to Gaussian attributes by a
single linear layer anchored at voxel centers.

Attention never crosses voxel boundaries. Groups are bucketed by size so
equal-sized voxels batch into one dense attention call; this is numerically
equivalent to a per-voxel loop (tested against it).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..splats.model import SplatScene
from ..tensor.engine import (Tensor, broadcast_to, concat, getitem, matmul,
                             reshape, take_rows, tsqrt, tsum, ttanh)
from ..tensor.nn import (Linear, Module, Parameter, TransformerBlock,
                         merge_heads, scaled_dot_attention, split_heads)
from ..tensor.nn import LayerNorm, SwiGLU
from ..voxels.grid import topk_indices

QUERY_MODES = ("topk_feats", "shared_latent", "voxel_mean")


def attribute_vector(scene, grid, order):
    """Per-Gaussian raw attributes, positions relative to their voxel center.

    Rows follow `order` (global Gaussian indices grouped by cell). Layout:
    [pos_rel(3), log_scales(3), quat(4), opacity_logit(1), sh(3M)].
    """
    cells = grid.cell_of[order]
    centers = grid.cell_center(cells)
    pos_rel = (scene.positions[order] - centers) / grid.cell_size
    sh = scene.sh[order].reshape(len(order), -1)
    return np.concatenate([
        pos_rel, scene.log_scales[order], scene.rotations[order],
        scene.opacity_logits[order, None], sh], axis=1).astype(np.float32)


def group_order(grid):
    """Canonical flat ordering: cells ascending, Gaussian index ascending."""
    cells = np.sort(grid.occupied_cells())
    order = np.concatenate([grid.groups[c] for c in cells]) if len(cells) \
        else np.empty(0, np.int64)
    lengths = np.array([len(grid.groups[c]) for c in cells], dtype=np.int64)
    return cells, order, lengths


@dataclass(frozen=True)
class _BucketPlan:
    buckets: tuple   # (size, n_groups, row_idx) per distinct group size
    inverse: np.ndarray

    @staticmethod
    def build(lengths):
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        by_size = {}
        for g, (s, ln) in enumerate(zip(starts, lengths)):
            by_size.setdefault(int(ln), []).append(np.arange(s, s + ln))
        buckets, perm = [], []
        for size in sorted(by_size):
            rows = np.concatenate(by_size[size])
            buckets.append((size, len(by_size[size]), rows))
            perm.append(rows)
        perm = np.concatenate(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return _BucketPlan(tuple(buckets), inv)


class PackedStack(Module):
    """Self-attention blocks confined to each group of a packed sequence."""

    def __init__(self, rng, dim, n_heads, n_layers):
        self.dim = dim
        self.blocks = [TransformerBlock(rng, dim, n_heads) for _ in range(n_layers)]

    def forward(self, flat, lengths):
        plan = _BucketPlan.build(lengths)
        x = flat
        for blk in self.blocks:
            outs = []
            for size, n_groups, rows in plan.buckets:
                xb = reshape(take_rows(x, rows), (n_groups, size, self.dim))
                outs.append(reshape(blk(xb), (n_groups * size, self.dim)))
            x = take_rows(concat(outs, axis=0), plan.inverse)
        return x


class CrossAttnBlock(Module):
    """Pre-norm residual cross-attention + SwiGLU MLP on the query stream."""

    def __init__(self, rng, dim, n_heads):
        self.n_heads = n_heads
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.wq = Linear(rng, dim, dim, bias=False)
        self.wk = Linear(rng, dim, dim, bias=False)
        self.wv = Linear(rng, dim, dim, bias=False)
        self.wo = Linear(rng, dim, dim, bias=False)
        self.norm2 = LayerNorm(dim)
        self.mlp = SwiGLU(rng, dim, 4 * dim)

    def forward(self, q, kv, force_uniform=False):
        qh = split_heads(self.wq(self.norm_q(q)), self.n_heads)
        kn = self.norm_kv(kv)
        kh = split_heads(self.wk(kn), self.n_heads)
        vh = split_heads(self.wv(kn), self.n_heads)
        if force_uniform:
            n_kv = kv.data.shape[-2]
            shape = qh.data.shape[:-1] + (n_kv,)
            probs = Tensor(np.full(shape, 1.0 / n_kv, dtype=np.float32))
            ctx = matmul(probs, vh)
        else:
            ctx = scaled_dot_attention(qh, kh, vh)
        x = q + self.wo(merge_heads(ctx))
        return x + self.mlp(self.norm2(x))


class VoxelCompressor(Module):
    """Encoder -> top-K cross-attention distill -> decoder -> linear GS head."""

    def __init__(self, rng, d_feature, sh_coeffs=4, d_model=64, n_heads=4,
                 l_enc=2, l_dec=2, topk_fraction=0.25, offset_cells=1.5,
                 query_mode="topk_feats", shared_bank=16):
        if query_mode not in QUERY_MODES:
            raise ValueError(f"query_mode must be one of {QUERY_MODES}")
        self.sh_coeffs = sh_coeffs
        self.d_attr = 11 + 3 * sh_coeffs
        self.d_model = d_model
        self.topk_fraction = topk_fraction
        self.offset_cells = offset_cells
        self.query_mode = query_mode
        self.in_proj = Linear(rng, d_feature + self.d_attr, d_model)
        self.encoder = PackedStack(rng, d_model, n_heads, l_enc)
        self.cross = CrossAttnBlock(rng, d_model, n_heads)
        self.decoder = PackedStack(rng, d_model, n_heads, l_dec)
        self.gs_out = Linear(rng, d_model, self.d_attr)
        if query_mode == "shared_latent":
            self.query_bank = Parameter(
                rng.standard_normal((shared_bank, d_model)).astype(np.float32) * 0.02)

    @classmethod
    def paper_scale(cls, rng, d_feature, sh_coeffs=25):
        return cls(rng, d_feature, sh_coeffs=sh_coeffs, d_model=512,
                   n_heads=8, l_enc=6, l_dec=6)

    # -- stage ops ----------------------------------------------------------

    def embed_voxel_tokens(self, grid, features, scene):
        """Linear([f_k ; attributes]) per Gaussian, grouped by voxel."""
        n_feat = features.data.shape[0] if isinstance(features, Tensor) else len(features)
        if n_feat != len(scene):
            raise ValueError(f"features rows {n_feat} != scene size {len(scene)}")
        if len(grid.cell_of) != len(scene):
            raise ValueError("grid was built for a different Gaussian count")
        cells, order, lengths = group_order(grid)
        attrs = attribute_vector(scene, grid, order)
        if isinstance(features, Tensor):
            feats_t = take_rows(features, order)
        else:
            feats_t = Tensor(np.asarray(features, dtype=np.float32)[order])
        tok = self.in_proj(concat([feats_t, Tensor(attrs)], axis=1))
        return tok, cells, order, lengths

    def encode(self, tokens, lengths):
        return self.encoder(tokens, lengths)

    def distill(self, z, lengths, opacities, order, force_uniform=False):
        """Select per-voxel queries and cross-attend over all group latents.

        Returns (latents (sum K, D), k_per_cell, query_ids) where query_ids
        holds the selected global Gaussian indices (None for the shared-query
        and mean-pooling variants).
        """
        starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
        if self.query_mode == "voxel_mean":
            outs = [reshape(tmean_rows(z, s, ln), (1, -1)) for s, ln in zip(starts, lengths)]
            return concat(outs, axis=0), np.ones(len(lengths), np.int64), None

        k_per_cell = np.maximum(
            np.floor(self.topk_fraction * lengths).astype(np.int64), 1)
        if self.query_mode == "shared_latent":
            k_per_cell = np.minimum(k_per_cell, self.query_bank.data.shape[0])

        q_rows, query_ids = [], []
        for s, ln in zip(starts, lengths):
            grp = order[s:s + ln]
            sel = topk_indices(grp, opacities, self.topk_fraction)
            local = s + np.searchsorted(grp, sel)
            q_rows.append(local)
            query_ids.append(sel)

        # bucket by group size; K is a function of N so buckets stay aligned
        by_size = {}
        for g, ln in enumerate(lengths):
            by_size.setdefault(int(ln), []).append(g)
        out_parts, out_slots = [], []
        slot_start = np.concatenate([[0], np.cumsum(k_per_cell)[:-1]])
        for size in sorted(by_size):
            gs = by_size[size]
            k = int(k_per_cell[gs[0]])
            kv_rows = np.concatenate([np.arange(starts[g], starts[g] + size) for g in gs])
            kv = reshape(take_rows(z, kv_rows), (len(gs), size, self.d_model))
            if self.query_mode == "shared_latent":
                q = broadcast_to(reshape(getitem(self.query_bank, slice(0, k)),
                                         (1, k, self.d_model)),
                                 (len(gs), k, self.d_model))
            else:
                rows = np.concatenate([q_rows[g][:k] for g in gs])
                q = reshape(take_rows(z, rows), (len(gs), k, self.d_model))
            out = self.cross(q, kv, force_uniform=force_uniform)
            out_parts.append(reshape(out, (len(gs) * k, self.d_model)))
            out_slots.append(np.concatenate(
                [np.arange(slot_start[g], slot_start[g] + k) for g in gs]))
        perm = np.concatenate(out_slots)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        latents = take_rows(concat(out_parts, axis=0), inv)
        ids = None if self.query_mode == "shared_latent" \
            else np.concatenate([q[:k] for q, k in zip(query_ids, k_per_cell)])
        return latents, k_per_cell, ids

    def decode_latents(self, latents, k_per_cell):
        return self.decoder(latents, k_per_cell)

    def gs_decode(self, latents, cells, k_per_cell, grid):
        """One linear layer -> attributes; positions = center + tanh * offset."""
        cell_of_slot = np.repeat(cells, k_per_cell)
        centers = grid.cell_center(cell_of_slot).astype(np.float32)
        return self.gs_decode_at(latents, centers, grid.cell_size)

    def gs_decode_at(self, latents, centers, cell_size):
        """gs_decode anchored at caller-chosen centers (one per latent row)."""
        n = latents.data.shape[0]
        raw = self.gs_out(latents)
        centers = np.asarray(centers, dtype=np.float32)
        span = (np.asarray(cell_size) * self.offset_cells).astype(np.float32)
        pos = Tensor(centers) + ttanh(getitem(raw, (slice(None), slice(0, 3)))) * Tensor(span)
        scale0 = float(np.log(0.3 * np.asarray(cell_size).mean()))
        log_scales = getitem(raw, (slice(None), slice(3, 6))) + scale0
        quat = getitem(raw, (slice(None), slice(6, 10))) + Tensor(
            np.array([1.0, 0, 0, 0], dtype=np.float32))
        quat = quat / tsqrt(tsum(quat * quat, axis=1, keepdims=True))
        # -2 bias: decoded splats start dim (alpha ~ 0.12), standard for splats
        op_logit = reshape(getitem(raw, (slice(None), slice(10, 11))), (n,)) - 2.0
        sh = reshape(getitem(raw, (slice(None), slice(11, self.d_attr))),
                     (n, 3, self.sh_coeffs))
        return pos, log_scales, quat, op_logit, sh

    # -- full pipeline ------------------------------------------------------

    def compress(self, grid, features, scene, force_uniform=False):
        """embed -> encode -> distill -> decode_latents on a voxelized cloud."""
        tok, cells, order, lengths = self.embed_voxel_tokens(grid, features, scene)
        z = self.encode(tok, lengths)
        ops = grid.opacities if grid.opacities is not None else scene.opacities()
        lat, k_per_cell, ids = self.distill(z, lengths, ops, order,
                                            force_uniform=force_uniform)
        lat = self.decode_latents(lat, k_per_cell)
        return lat, cells, k_per_cell, ids

    def decoded_scene(self, latents, cells, k_per_cell, grid, bounds=None):
        pos, ls, q, op, sh = self.gs_decode(latents, cells, k_per_cell, grid)
        return SplatScene(pos.data, ls.data, q.data, op.data, sh.data,
                          bounds=bounds)


def tmean_rows(z, start, length):
    rows = take_rows(z, np.arange(start, start + length))
    return tsum(rows, axis=0) / float(length)
