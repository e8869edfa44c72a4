"""Multiview patch transformer producing per-pixel Gaussians with features.

Desk-scale surrogate for a large reconstruction backbone: patch tokens from
V posed views run through pre-norm self-attention blocks, and a linear head
decodes one Gaussian per input pixel (position parameterized as depth along
the pixel ray). Each Gaussian carries the contextual token of its patch as
an aligned feature vector; the model is trained once, then frozen by the
downstream compression and refinement stages.
"""

from __future__ import annotations

from dataclasses import dataclass, replace as _dc_replace

import numpy as np

from ..splats.model import SplatScene
from ..splats.model import sigmoid as np_sigmoid
from ..splats.sh import n_coeffs
from ..tensor.engine import (Tensor, broadcast_to, concat, getitem, reshape,
                             sigmoid, take_rows, tsqrt, tsum)
from ..tensor.nn import Linear, Module, Parameter, TransformerBlock

IDENTITY_BIAS_OFF = -1e9  # off-diagonal logit that underflows softmax to exact 0


def patchify(image, patch):
    """(H, W, C) -> (T, patch*patch*C); patches row-major, pixels row-major."""
    h, w, c = image.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    gy, gx = h // patch, w // patch
    x = image.reshape(gy, patch, gx, patch, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x).reshape(gy * gx, patch * patch * c)


def pixel_dirs_world(cam, coords):
    """Unit world-space ray directions through integer pixel coords (N, 2) xy."""
    x = (coords[:, 0] - cam.cx) / cam.fx
    y = (coords[:, 1] - cam.cy) / cam.fy
    d = np.stack([x, y, np.ones_like(x)], axis=1)
    d = d @ cam.R  # rows: R^T @ d_cam
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _patch_pluecker(cam, h, w, patch):
    gy, gx = h // patch, w // patch
    half = (patch - 1) / 2.0
    cy, cx = np.meshgrid(np.arange(gy), np.arange(gx), indexing="ij")
    coords = np.stack([cx.ravel() * patch + half, cy.ravel() * patch + half], axis=1)
    d = pixel_dirs_world(cam, coords)
    m = np.cross(np.broadcast_to(cam.cam_position(), d.shape), d)
    return np.concatenate([d, m], axis=1).astype(np.float32)


@dataclass(frozen=True)
class ImageTokens:
    """Flattened per-view patch tokens plus the geometry needed to decode."""

    tokens: Tensor          # (V * tokens_per_view, D)
    n_views: int
    tokens_per_view: int
    patch: int
    image_size: tuple       # (H, W)
    cameras: tuple

    def __post_init__(self):
        h, w = self.image_size
        assert self.tokens_per_view == (h // self.patch) * (w // self.patch)


@dataclass(frozen=True)
class FeatureGaussians:
    """One Gaussian per input pixel, aligned 1:1 with feature tokens."""

    positions: Tensor       # (N, 3)
    log_scales: Tensor      # (N, 3)
    rotations: Tensor       # (N, 4) unit
    opacity_logits: Tensor  # (N,)
    sh: Tensor              # (N, 3, M)
    features: Tensor        # (N, D)
    view_of: np.ndarray     # (N,) source view id
    pixel_of: np.ndarray    # (N,) row-major pixel index within the view

    def __len__(self):
        return self.positions.data.shape[0]

    def opacities(self):
        return np_sigmoid(self.opacity_logits.data)

    def render_tensors(self):
        return (self.positions, self.log_scales, self.rotations,
                self.opacity_logits, self.sh)

    def prune(self, floor=0.005):
        """Drop Gaussians with decoded opacity <= floor; alignment preserved."""
        keep = np.flatnonzero(self.opacities() > floor)
        return FeatureGaussians(
            positions=take_rows(self.positions, keep),
            log_scales=take_rows(self.log_scales, keep),
            rotations=take_rows(self.rotations, keep),
            opacity_logits=take_rows(self.opacity_logits, keep),
            sh=take_rows(self.sh, keep),
            features=take_rows(self.features, keep),
            view_of=self.view_of[keep], pixel_of=self.pixel_of[keep])

    def detached_scene(self, bounds=None):
        return SplatScene(self.positions.data, self.log_scales.data,
                          self.rotations.data, self.opacity_logits.data,
                          self.sh.data, bounds=bounds)

    def detached_features(self):
        return np.asarray(self.features.data)


class FeatureLRM(Module):
    """tokenize -> backbone -> decode_pixel_gaussians, end to end differentiable."""

    def __init__(self, rng, d_model=64, patch=8, image_size=(64, 64),
                 n_layers=4, n_heads=4, sh_degree=1, d_pos=16,
                 depth_range=(0.2, 8.0)):
        h, w = image_size
        if h % patch or w % patch:
            raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
        self.d_model = d_model
        self.patch = patch
        self.image_size = (h, w)
        self.tokens_per_view = (h // patch) * (w // patch)
        self.sh_degree = sh_degree
        self.n_sh = n_coeffs(sh_degree)
        self.depth_range = (float(depth_range[0]), float(depth_range[1]))
        # per-pixel attributes: depth, 3 log-scales, quat, opacity logit, SH
        self.n_attr = 1 + 3 + 4 + 1 + 3 * self.n_sh

        self.embed = Linear(rng, patch * patch * 3, d_model)
        self.pos_enc = Parameter(
            rng.standard_normal((self.tokens_per_view, d_pos)).astype(np.float32) * 0.02)
        self.proj = Linear(rng, d_model + d_pos + 6, d_model)
        self.blocks = [TransformerBlock(rng, d_model, n_heads) for _ in range(n_layers)]
        self.head = Linear(rng, d_model, patch * patch * self.n_attr)

    # -- tokenize ---------------------------------------------------------

    def tokenize(self, images, cameras):
        images = np.asarray(images, dtype=np.float32)
        v, h, w, _ = images.shape
        if (h, w) != self.image_size:
            raise ValueError(f"expected {self.image_size} images, got {(h, w)}")
        if len(cameras) != v:
            raise ValueError("camera count does not match view count")
        patches = np.stack([patchify(img, self.patch) for img in images])
        t = self.tokens_per_view
        emb = self.embed(Tensor(patches.reshape(v * t, -1)))
        pos = reshape(broadcast_to(reshape(self.pos_enc, (1, t, -1)),
                                   (v, t, self.pos_enc.data.shape[1])),
                      (v * t, -1))
        rays = np.concatenate([_patch_pluecker(c, h, w, self.patch) for c in cameras])
        tok = self.proj(concat([emb, pos, Tensor(rays)], axis=1))
        return ImageTokens(tokens=tok, n_views=v, tokens_per_view=t,
                           patch=self.patch, image_size=(h, w),
                           cameras=tuple(cameras))

    # -- backbone ---------------------------------------------------------

    def backbone(self, tokens, identity_attention=False):
        x = tokens.tokens if isinstance(tokens, ImageTokens) else tokens
        bias = None
        if identity_attention:
            n = x.data.shape[0]
            bias = Tensor((1.0 - np.eye(n, dtype=np.float32)) * IDENTITY_BIAS_OFF)
        for blk in self.blocks:
            x = blk(x, bias=bias)
        return x

    # -- decode -----------------------------------------------------------

    def decode_pixel_gaussians(self, ctx, tokens):
        v, t, p = tokens.n_views, tokens.tokens_per_view, tokens.patch
        h, w = tokens.image_size
        n = v * h * w
        raw = reshape(self.head(ctx), (v * t * p * p, self.n_attr))

        # patch-major pixel order -> row-major pixel order, per view
        perm = _patch_to_rowmajor_perm(h, w, p)
        full_perm = (np.arange(v)[:, None] * (h * w) + perm[None, :]).ravel()
        raw = take_rows(raw, full_perm)

        d_lo, d_hi = self.depth_range
        depth = sigmoid(getitem(raw, (slice(None), slice(0, 1)))) * (d_hi - d_lo) + d_lo
        log_scales = getitem(raw, (slice(None), slice(1, 4))) - 3.0
        quat = getitem(raw, (slice(None), slice(4, 8))) + Tensor(
            np.array([1.0, 0, 0, 0], dtype=np.float32))
        quat = quat / tsqrt(tsum(quat * quat, axis=1, keepdims=True))
        op_logit = reshape(getitem(raw, (slice(None), slice(8, 9))), (n,)) - 2.0
        sh = reshape(getitem(raw, (slice(None), slice(9, 9 + 3 * self.n_sh))),
                     (n, 3, self.n_sh))

        coords = np.stack(np.meshgrid(np.arange(w), np.arange(h), indexing="xy"),
                          axis=-1).reshape(-1, 2).astype(np.float64)
        dirs, origins = [], []
        for cam in tokens.cameras:
            dirs.append(pixel_dirs_world(cam, coords))
            origins.append(np.broadcast_to(cam.cam_position(), (h * w, 3)))
        dirs = np.concatenate(dirs).astype(np.float32)
        origins = np.concatenate(origins).astype(np.float32)
        positions = Tensor(origins) + depth * Tensor(dirs)

        patch_of_pixel = _pixel_patch_index(h, w, p)
        feat_idx = (np.arange(v)[:, None] * t + patch_of_pixel[None, :]).ravel()
        features = take_rows(ctx, feat_idx)

        return FeatureGaussians(
            positions=positions, log_scales=log_scales, rotations=quat,
            opacity_logits=op_logit, sh=sh, features=features,
            view_of=np.repeat(np.arange(v), h * w),
            pixel_of=np.tile(np.arange(h * w), v))

    def forward(self, images, cameras, identity_attention=False):
        tokens = self.tokenize(images, cameras)
        ctx = self.backbone(tokens, identity_attention=identity_attention)
        return self.decode_pixel_gaussians(ctx, tokens)


def _patch_to_rowmajor_perm(h, w, p):
    """perm[row-major pixel] = its index in (patch-major, pixel-in-patch) order."""
    gy, gx = h // p, w // p
    idx = np.arange(h * w).reshape(gy, p, gx, p).transpose(0, 2, 1, 3).ravel()
    # idx maps patch-major position -> row-major pixel id; invert it
    inv = np.empty_like(idx)
    inv[idx] = np.arange(h * w)
    return inv


def _pixel_patch_index(h, w, p):
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return ((ys // p) * (w // p) + xs // p).ravel()
