"""Multiview feature transformer: tokens, backbone hooks, pixel decode."""

import numpy as np
import pytest

from splatedit.lrm import FeatureLRM, patchify
from splatedit.lrm.model import (FeatureGaussians, _patch_to_rowmajor_perm,
                                 _pixel_patch_index)
from splatedit.render import RasterConfig, rasterize_tensors
from splatedit.splats import camera_from_lookat, orbit_cameras
from splatedit.tensor import Tensor, grad_of, tmean


def small_model(seed=0, **kw):
    rng = np.random.default_rng(seed)
    args = dict(d_model=32, patch=8, image_size=(16, 16), n_layers=2,
                n_heads=4, sh_degree=0, d_pos=8)
    args.update(kw)
    return FeatureLRM(rng, **args)


def views(v, h=16, w=16, seed=1):
    rng = np.random.default_rng(seed)
    imgs = rng.uniform(0, 1, (v, h, w, 3)).astype(np.float32)
    cams = orbit_cameras(v, [0, 0, 0], 3.0, fx=float(w), width=w, height=h)
    return imgs, cams


class TestTokenize:
    def test_token_count_64x64_p8(self):
        m = small_model(image_size=(64, 64))
        imgs, cams = views(1, 64, 64)
        toks = m.tokenize(imgs, cams)
        assert toks.tokens_per_view == 64
        assert toks.tokens.data.shape == (64, 32)

    @pytest.mark.parametrize("v,h,w,p", [(2, 32, 32, 8), (1, 64, 64, 8), (3, 16, 24, 8)])
    def test_count_formula(self, v, h, w, p):
        m = small_model(image_size=(h, w), patch=p)
        imgs, cams = views(v, h, w)
        toks = m.tokenize(imgs, cams)
        assert toks.tokens.data.shape[0] == v * (h // p) * (w // p)

    def test_identical_views_give_identical_tokens(self):
        m = small_model()
        imgs, cams = views(1)
        both = np.concatenate([imgs, imgs])
        toks = m.tokenize(both, [cams[0], cams[0]])
        t = toks.tokens_per_view
        assert np.array_equal(toks.tokens.data[:t], toks.tokens.data[t:])

    def test_indivisible_image_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            small_model(image_size=(60, 64))
        m = small_model()
        imgs, cams = views(1, 16, 16)
        with pytest.raises(ValueError, match="expected"):
            m.tokenize(np.zeros((1, 24, 16, 3), np.float32), cams)

    def test_patch_shift_permutes_patch_contents(self):
        rng = np.random.default_rng(2)
        img = rng.uniform(0, 1, (32, 32, 3)).astype(np.float32)
        shifted = np.roll(img, 8, axis=1)  # one full patch to the right
        a, b = patchify(img, 8), patchify(shifted, 8)
        gx = 4
        for r in range(4):
            for c in range(4):
                assert np.array_equal(b[r * gx + c], a[r * gx + (c - 1) % gx])

    def test_patchify_layout(self):
        img = np.arange(16 * 16 * 3, dtype=np.float32).reshape(16, 16, 3)
        p = patchify(img, 8)
        assert p.shape == (4, 192)
        # patch 1 = columns 8..15 of rows 0..7; first pixel = (0, 8)
        assert np.array_equal(p[1, :3], img[0, 8])


class TestBackbone:
    def test_output_shape_matches_input(self):
        m = small_model()
        imgs, cams = views(2)
        toks = m.tokenize(imgs, cams)
        out = m.backbone(toks)
        assert out.data.shape == toks.tokens.data.shape

    def test_identity_attention_is_per_token(self):
        m = small_model()
        rng = np.random.default_rng(3)
        x = rng.standard_normal((6, 32)).astype(np.float32)
        full = m.backbone(Tensor(x), identity_attention=True).data
        for i in (0, 3, 5):
            solo = m.backbone(Tensor(x[i:i + 1]), identity_attention=True).data
            assert np.allclose(full[i], solo[0], atol=1e-6)

    def test_attention_rows_sum_to_one(self):
        from splatedit.tensor.engine import softmax_lastdim
        from splatedit.tensor.nn import split_heads
        m = small_model()
        imgs, cams = views(2)
        toks = m.tokenize(imgs, cams)
        blk = m.blocks[0]
        xn = blk.norm1(toks.tokens)
        q = split_heads(blk.attn.wq(xn), blk.attn.n_heads)
        k = split_heads(blk.attn.wk(xn), blk.attn.n_heads)
        from splatedit.tensor.engine import matmul, swap_last2
        scale = 1.0 / np.sqrt(q.data.shape[-1])
        probs = softmax_lastdim(matmul(q, swap_last2(k)) * scale).data
        assert np.allclose(probs.sum(axis=-1), 1.0, atol=1e-5)

    def test_deterministic_per_seed(self):
        imgs, cams = views(2)
        a = small_model(seed=11).forward(imgs, cams)
        b = small_model(seed=11).forward(imgs, cams)
        assert np.array_equal(a.positions.data, b.positions.data)
        assert np.array_equal(a.features.data, b.features.data)
        c = small_model(seed=12).forward(imgs, cams)
        assert not np.array_equal(a.positions.data, c.positions.data)

    def test_checkpoint_roundtrip_preserves_output(self, tmp_path):
        from splatedit.tensor import load_weights, save_weights
        imgs, cams = views(1)
        m = small_model(seed=5)
        ref = m.forward(imgs, cams).positions.data.copy()
        save_weights(tmp_path / "m.spwt", dict(m.named_parameters()))
        m2 = small_model(seed=99)
        m2.load_state_dict(load_weights(tmp_path / "m.spwt"))
        assert np.array_equal(m2.forward(imgs, cams).positions.data, ref)


class TestDecode:
    def test_gaussian_count_and_alignment_sizes(self):
        m = small_model()
        imgs, cams = views(2)
        fg = m.forward(imgs, cams)
        assert len(fg) == 2 * 16 * 16
        assert fg.features.data.shape == (len(fg), 32)
        assert fg.view_of.shape == (len(fg),)

    def test_on_axis_pixel_decodes_along_optical_axis(self):
        m = small_model(image_size=(64, 64))
        imgs, cams = views(1, 64, 64)
        fg = m.forward(imgs, cams)
        cam = cams[0]
        # cx = cy = 32.0: pixel (32, 32) samples the optical axis exactly
        k = 32 * 64 + 32
        p = fg.positions.data[k].astype(np.float64)
        rel = p - cam.cam_position()
        dist = np.linalg.norm(rel)
        fwd = cam.R[2]
        assert np.allclose(rel / dist, fwd, atol=1e-6)
        assert m.depth_range[0] <= dist <= m.depth_range[1]

    def test_all_depths_inside_configured_range(self):
        m = small_model(depth_range=(0.5, 4.0))
        imgs, cams = views(2)
        fg = m.forward(imgs, cams)
        for v, cam in enumerate(cams):
            rows = fg.view_of == v
            d = np.linalg.norm(fg.positions.data[rows] - cam.cam_position(), axis=1)
            assert d.min() >= 0.5 and d.max() <= 4.0

    def test_row_major_permutation_formula(self):
        h = w = 16
        p = 8
        perm = _patch_to_rowmajor_perm(h, w, p)
        gx = w // p
        for y in range(h):
            for x in range(w):
                q = ((y // p) * gx + x // p) * p * p + (y % p) * p + (x % p)
                assert perm[y * w + x] == q

    def test_feature_is_patch_context_token(self):
        m = small_model()
        imgs, cams = views(2)
        toks = m.tokenize(imgs, cams)
        ctx = m.backbone(toks)
        fg = m.decode_pixel_gaussians(ctx, toks)
        t = toks.tokens_per_view
        patch_of = _pixel_patch_index(16, 16, 8)
        for k in (0, 100, 300, 511):
            v, pix = fg.view_of[k], fg.pixel_of[k]
            assert np.array_equal(fg.features.data[k], ctx.data[v * t + patch_of[pix]])

    def test_floored_opacity_logits_squash_to_zero(self):
        m = small_model()
        cols = 8 + np.arange(64) * m.n_attr  # opacity slot of each pixel block
        m.head.b.data[cols] = -50.0
        imgs, cams = views(1)
        fg = m.forward(imgs, cams)
        assert fg.opacities().max() <= 1e-9
        assert len(fg.prune(0.005)) == 0

    def test_prune_keeps_alignment(self):
        m = small_model()
        imgs, cams = views(2)
        fg = m.forward(imgs, cams)
        rng = np.random.default_rng(4)
        logits = rng.uniform(-8, 2, len(fg)).astype(np.float32)
        fg = FeatureGaussians(fg.positions, fg.log_scales, fg.rotations,
                              Tensor(logits), fg.sh, fg.features,
                              fg.view_of, fg.pixel_of)
        kept = fg.prune(0.005)
        want = np.flatnonzero(1 / (1 + np.exp(-logits.astype(np.float64))) > 0.005)
        assert np.array_equal(np.sort(kept.pixel_of + kept.view_of * 256),
                              np.sort(fg.pixel_of[want] + fg.view_of[want] * 256))
        assert np.array_equal(kept.features.data, fg.features.data[want])
        assert np.array_equal(kept.positions.data, fg.positions.data[want])
        assert 0 < len(kept) < len(fg)

    def test_rotations_are_unit(self):
        m = small_model()
        imgs, cams = views(1)
        fg = m.forward(imgs, cams)
        n = np.linalg.norm(fg.rotations.data, axis=1)
        assert np.allclose(n, 1.0, atol=1e-6)


class TestGradientFlow:
    def test_render_loss_reaches_backbone_weights(self):
        m = small_model(seed=7)
        imgs, cams = views(2, seed=8)
        fg = m.forward(imgs, cams)
        cfg = RasterConfig(sh_degree=0)
        color, _ = rasterize_tensors(*fg.render_tensors(), cams[0], cfg)
        target = Tensor(np.full((16, 16, 3), 0.5, np.float32))
        loss = tmean((color - target) * (color - target))
        w = m.blocks[0].attn.wq.w
        (g,) = grad_of(loss, [w])
        assert np.linalg.norm(g.data) > 0
        assert np.isfinite(g.data).all()

    def test_embed_and_head_both_receive_gradient(self):
        m = small_model(seed=9)
        imgs, cams = views(1, seed=10)
        fg = m.forward(imgs, cams)
        loss = tmean(fg.positions * fg.positions) + tmean(fg.features * fg.features)
        ge, gh = grad_of(loss, [m.embed.w, m.head.w])
        assert np.linalg.norm(ge.data) > 0
        assert np.linalg.norm(gh.data) > 0
