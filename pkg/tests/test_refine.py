"""Fast-weight refinement: orthogonalized updates, TTT blocks, edit sessions."""

import numpy as np
import pytest

from splatedit.compress import VoxelCompressor, compress_asset
from splatedit.lrm import FeatureLRM
from splatedit.refine import (EditView, MuonState, TTTBlock, TTTRefiner,
                              adapt, apply_streams, decoded_scene, load_session,
                              merge_local, new_session, newton_schulz_orth,
                              refine, reset_session, save_session)
from splatedit.render.raster import RasterConfig, rasterize
from splatedit.splats import random_desk_scene
from splatedit.splats.model import camera_from_lookat
from splatedit.tensor import Tensor, grad_of


# ---------------------------------------------------------------------------
# newton_schulz_orth
# ---------------------------------------------------------------------------

def polar_factor(m):
    u, _, vt = np.linalg.svd(m, full_matrices=False)
    return u @ vt


class TestOrth:
    def test_orthogonal_input_is_fixed_point(self):
        q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((4, 4)))
        out = newton_schulz_orth(q)
        assert np.abs(out - q).max() < 1e-2

    def test_diag_matches_svd_oracle(self):
        m = np.diag([2.0, 1.0])
        out = newton_schulz_orth(m)
        assert np.abs(out - polar_factor(m)).max() < 1e-2
        assert np.abs(out - np.eye(2)).max() < 1e-2

    def test_rectangular_matches_svd_oracle(self):
        m = np.random.default_rng(3).standard_normal((8, 5))
        out = newton_schulz_orth(m)
        assert np.abs(out - polar_factor(m)).max() < 1e-2

    def test_singular_band_controlled_spectrum(self):
        """All output singular values in [0.7, 1.3] for spectra in the design range."""
        for seed in range(20):
            rng = np.random.default_rng(seed)
            u, _ = np.linalg.qr(rng.standard_normal((32, 32)))
            v, _ = np.linalg.qr(rng.standard_normal((32, 32)))
            s = rng.uniform(0.05, 1.0, 32)
            a = (u * s) @ v.T
            sv = np.linalg.svd(newton_schulz_orth(a), compute_uv=False)
            assert sv.min() >= 0.7 and sv.max() <= 1.3, f"seed {seed}"

    def test_singular_band_gaussian_above_floor(self):
        """Gaussian inputs: every direction whose normalized singular value is
        at least the schedule's design floor (5e-3) lands in [0.7, 1.3].
        Directions below the floor shrink toward zero instead; no 5-step
        quintic can rescue them (see the decisions ledger)."""
        for seed in range(30):
            a = np.random.default_rng(seed).standard_normal((32, 32))
            s_in = np.linalg.svd(a, compute_uv=False) / np.linalg.norm(a)
            m = int((s_in >= 5e-3).sum())
            sv = np.sort(np.linalg.svd(newton_schulz_orth(a), compute_uv=False))
            top = sv[len(sv) - m:]
            assert top.min() >= 0.7 and top.max() <= 1.3, f"seed {seed}"
            assert sv.max() <= 1.3

    def test_zero_matrix_flagged(self):
        with pytest.warns(UserWarning, match="zero"):
            out = newton_schulz_orth(np.zeros((3, 3)))
        assert np.array_equal(out, np.zeros((3, 3)))

    def test_vector_and_scalar_closed_form(self):
        v = np.array([[3.0, 0.0, 4.0]])
        assert np.allclose(newton_schulz_orth(v), v / 5.0, atol=1e-7)
        col = v.T
        assert np.allclose(newton_schulz_orth(col), col / 5.0, atol=1e-7)
        assert newton_schulz_orth(np.array([[-4.0]]))[0, 0] == -1.0
        assert newton_schulz_orth(np.array([[0.1]]))[0, 0] == 1.0

    def test_tensor_path_matches_numpy_and_differentiates(self):
        m = np.random.default_rng(5).standard_normal((6, 6)).astype(np.float32)
        t = Tensor(m.copy())
        out_t = newton_schulz_orth(t)
        assert np.allclose(out_t.data, newton_schulz_orth(m), atol=1e-5)
        from splatedit.tensor.engine import tsum
        loss = tsum(out_t * out_t)
        (g,) = grad_of(loss, [t])
        assert g.data.shape == (6, 6)
        assert np.isfinite(g.data).all()

    def test_fewer_iterations_still_contract(self):
        m = np.diag([2.0, 1.0])
        out3 = newton_schulz_orth(m, iters=3)
        assert np.abs(out3 - np.eye(2)).max() < 0.5
        assert not np.allclose(out3, newton_schulz_orth(m, iters=5))


# ---------------------------------------------------------------------------
# adapt (Muon inner loop)
# ---------------------------------------------------------------------------

def linear_block(dim, seed=0, **kw):
    rng = np.random.default_rng(seed)
    return TTTBlock(rng, dim, fast_mode="linear", **kw)


class TestAdapt:
    def test_exact_fit_is_stationary(self):
        """f_W(k) = v for every token leaves the fast weights untouched."""
        blk = linear_block(4, seed=1)
        blk.wv.w.data = blk.wk.w.data.copy()          # v_i = k_i
        fast = [Tensor(np.eye(4, dtype=np.float32))]  # f_W = identity
        x = Tensor(np.random.default_rng(2).standard_normal((6, 4)).astype(np.float32))
        new, trace = adapt(blk, x, MuonState(), fast=fast)
        assert np.array_equal(new[0].data, fast[0].data)
        assert trace[0] < 1e-10 and trace[-1] < 1e-10

    def test_scalar_probe_hand_run(self):
        """1x1 config: k=1, v=2, w0=0, eta=0.1, mu=0 -> one step gives w=0.1."""
        blk = linear_block(1, seed=0)
        blk.wk.w.data = np.array([[1.0]], dtype=np.float32)
        blk.wv.w.data = np.array([[2.0]], dtype=np.float32)
        fast = [Tensor(np.array([[0.0]], dtype=np.float32))]
        x = Tensor(np.array([[1.0]], dtype=np.float32))
        new, trace = adapt(blk, x, MuonState(eta=0.1, mu=0.0, steps=1), fast=fast)
        assert new[0].data[0, 0] == pytest.approx(0.1, abs=1e-7)
        assert trace[0] == pytest.approx(4.0, abs=1e-5)
        assert trace[-1] < trace[0]

    def test_loss_trace_nonincreasing_on_95_percent(self):
        """Five Muon steps at the tuned step size descend on >=95/100 batches."""
        good = 0
        for seed in range(100):
            rng = np.random.default_rng(1000 + seed)
            blk = TTTBlock(rng, 16, fast_hidden=16)
            x = Tensor(rng.standard_normal((24, 16)).astype(np.float32))
            _, trace = adapt(blk, x, MuonState())
            diffs = np.diff(np.asarray(trace))
            if (diffs <= 1e-7).all():
                good += 1
        assert good >= 95, f"monotone on only {good}/100 batches"

    def test_final_loss_not_above_initial_everywhere(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            blk = TTTBlock(rng, 8, fast_hidden=8)
            x = Tensor(rng.standard_normal((12, 8)).astype(np.float32))
            _, trace = adapt(blk, x, MuonState())
            assert trace[-1] <= trace[0] + 1e-7

    def test_empty_tokens_rejected(self):
        blk = linear_block(4)
        x = Tensor(np.zeros((0, 4), dtype=np.float32))
        with pytest.raises(ValueError, match="token"):
            adapt(blk, x, MuonState())

    def test_zero_steps_returns_input_fast(self):
        blk = linear_block(4, seed=3)
        fast = blk.fast_start()
        x = Tensor(np.random.default_rng(0).standard_normal((5, 4)).astype(np.float32))
        new, trace = adapt(blk, x, MuonState(steps=0), fast=fast)
        assert len(trace) == 1
        assert all(np.array_equal(a.data, b.data) for a, b in zip(new, fast))


# ---------------------------------------------------------------------------
# apply_streams
# ---------------------------------------------------------------------------

class TestApplyStreams:
    def test_zero_fast_weights_reduce_to_mlp(self):
        rng = np.random.default_rng(4)
        blk = TTTBlock(rng, 8, fast_hidden=8)
        fast = [Tensor(np.zeros_like(p.data)) for p in blk.fast_start()]
        x = Tensor(rng.standard_normal((5, 8)).astype(np.float32))
        lat = Tensor(rng.standard_normal((7, 8)).astype(np.float32))
        x2, lat2 = apply_streams(blk, x, lat, fast)
        want_x = (x + blk.mlp(blk.norm2(x))).data
        want_l = (lat + blk.mlp(blk.norm2(lat))).data
        assert np.array_equal(x2.data, want_x)
        assert np.array_equal(lat2.data, want_l)

    def test_shapes_preserved(self):
        rng = np.random.default_rng(5)
        blk = TTTBlock(rng, 8)
        fast = blk.fast_start()
        x = Tensor(rng.standard_normal((3, 8)).astype(np.float32))
        lat = Tensor(rng.standard_normal((11, 8)).astype(np.float32))
        x2, lat2 = apply_streams(blk, x, lat, fast)
        assert x2.data.shape == (3, 8) and lat2.data.shape == (11, 8)

    def test_stream_symmetry_with_identity_probe(self):
        """Same query head + identity f_W: both streams compute the same map."""
        blk = linear_block(8, seed=6)
        blk.wqv.w.data = blk.wq.w.data.copy()
        fast = [Tensor(np.eye(8, dtype=np.float32))]
        same = np.random.default_rng(7).standard_normal((4, 8)).astype(np.float32)
        x2, lat2 = apply_streams(blk, Tensor(same.copy()), Tensor(same.copy()), fast)
        assert np.array_equal(x2.data, lat2.data)

    def test_masked_rows_only_touch_selection(self):
        rng = np.random.default_rng(8)
        blk = TTTBlock(rng, 8)
        fast = blk.fast_start()
        lat = Tensor(rng.standard_normal((10, 8)).astype(np.float32))
        x = Tensor(rng.standard_normal((3, 8)).astype(np.float32))
        rows = np.array([1, 4, 5])
        _, lat2 = apply_streams(blk, x, lat, fast, latent_rows=rows)
        others = np.setdiff1d(np.arange(10), rows)
        assert np.array_equal(lat2.data[others], lat.data[others])
        assert not np.allclose(lat2.data[rows], lat.data[rows])
        _, full = apply_streams(blk, x, lat, fast)
        assert np.allclose(lat2.data[rows], full.data[rows], atol=1e-6)


# ---------------------------------------------------------------------------
# edit sessions
# ---------------------------------------------------------------------------

DIM = 32
IMG = 16


@pytest.fixture(scope="module")
def stage():
    """Tiny end-to-end fixture: asset -> latents, shared by session tests."""
    scene = random_desk_scene(11, n_objects=2, gaussians_per_object=60,
                              sh_degree=1)
    rng = np.random.default_rng(0)
    lrm = FeatureLRM(rng, d_model=DIM, patch=8, image_size=(IMG, IMG),
                     n_layers=1, n_heads=4, sh_degree=1, d_pos=8)
    comp = VoxelCompressor(np.random.default_rng(1), d_feature=DIM,
                           sh_coeffs=4, d_model=DIM, n_heads=4,
                           l_enc=1, l_dec=1)
    base, grid, fg = compress_asset(scene, lrm, comp, res=8, n_views=3)
    refiner = TTTRefiner(np.random.default_rng(2), dim=DIM, n_blocks=2,
                         n_heads=4)
    return dict(scene=scene, lrm=lrm, comp=comp, base=base, grid=grid,
                refiner=refiner)


def fresh_session(stage, **muon_kw):
    return new_session(stage["base"], stage["lrm"], stage["comp"],
                       stage["refiner"], muon=MuonState(**muon_kw))


def edit_views(stage, n=1, shade=0.9, seed=0):
    """Recolor-style edits: canonical cameras, uniformly dimmed renders."""
    from splatedit.compress.pipeline import canonical_cameras
    cams = canonical_cameras(stage["scene"], n_views=max(n, 2),
                             width=IMG, height=IMG)[:n]
    views = []
    for c in cams:
        img = rasterize(stage["scene"], c, RasterConfig()).color * shade
        views.append(EditView(image=img.astype(np.float32), camera=c))
    return views


class TestRefine:
    def test_global_refine_updates_latents_and_state(self, stage):
        s = fresh_session(stage)
        before = s.current.copy()
        f0 = [[m.data.copy() for m in blk] for blk in s.fast]
        refine(s, edit_views(stage), mode="global")
        assert not np.allclose(s.current, before)
        changed = any(
            not np.array_equal(m.data, m0)
            for blk, blk0 in zip(s.fast, f0) for m, m0 in zip(blk, blk0))
        assert changed
        assert len(s.history) == 1 and s.history[0].mode == "global"

    def test_zero_inner_steps_equals_feedforward(self, stage):
        """n=0 refine is the pure W0 forward pass from the base latents."""
        s = fresh_session(stage, steps=0)
        views = edit_views(stage)
        refine(s, views, mode="global")
        lat = Tensor(stage["base"].latents.copy())
        with_np = stage["lrm"].tokenize(
            np.stack([v.image for v in views]), [v.camera for v in views])
        x = Tensor(with_np.tokens.data.copy())
        for blk in stage["refiner"].blocks:
            x, lat = apply_streams(blk, x, lat, blk.fast_start())
        assert np.array_equal(s.current, lat.data)

    def test_sequential_n0_coincides_with_union(self, stage):
        v2 = edit_views(stage, n=2)
        a = fresh_session(stage, steps=0)
        refine(a, [v2[0]], mode="global")
        refine(a, [v2[1]], mode="global")
        b = fresh_session(stage, steps=0)
        refine(b, v2, mode="global")
        assert np.array_equal(a.current, b.current)

    def test_sequential_adapts_differ_from_union(self, stage):
        v2 = edit_views(stage, n=2)
        a = fresh_session(stage)
        refine(a, [v2[0]], mode="global")
        refine(a, [v2[1]], mode="global")
        b = fresh_session(stage)
        refine(b, v2, mode="global")
        assert not np.array_equal(a.current, b.current)

    def test_refine_is_deterministic(self, stage):
        views = edit_views(stage)
        a = fresh_session(stage)
        b = fresh_session(stage)
        refine(a, views, mode="global")
        refine(b, views, mode="global")
        assert np.array_equal(a.current, b.current)

    def test_local_mode_leaves_nonhit_latents_bit_identical(self, stage):
        s = fresh_session(stage)
        views = edit_views(stage)
        before = s.current.copy()
        refine(s, views, mode="local")
        rec = s.history[-1]
        assert rec.mode == "local" and rec.hit_cells is not None
        slots = stage["base"].cell_of_slot()
        hit_rows = np.isin(slots, rec.hit_cells)
        assert hit_rows.any() and not hit_rows.all()
        assert np.array_equal(s.current[~hit_rows], before[~hit_rows])
        assert not np.allclose(s.current[hit_rows], before[hit_rows])

    def test_local_mode_without_hits_warns_and_noops(self, stage):
        s = fresh_session(stage)
        before = s.current.copy()
        center = (stage["base"].bounds_min
                  + stage["base"].cell_size * stage["base"].resolution / 2)
        eye = center + np.array([25.0, 0.0, 0.0])
        cam = camera_from_lookat(eye, eye + np.array([25.0, 0.0, 0.0]),
                                 fx=float(IMG), width=IMG, height=IMG)
        img = np.zeros((IMG, IMG, 3), dtype=np.float32)
        with pytest.warns(UserWarning, match="hit"):
            refine(s, [EditView(image=img, camera=cam)], mode="local")
        assert np.array_equal(s.current, before)

    def test_reset_restores_and_replays_bit_exactly(self, stage):
        s = fresh_session(stage)
        views = edit_views(stage)
        base_copy = stage["base"].latents.copy()
        refine(s, views, mode="global")
        first = s.current.copy()
        reset_session(s)
        assert np.array_equal(s.current, stage["base"].latents)
        assert len(s.history) == 0
        refine(s, views, mode="global")
        assert np.array_equal(s.current, first)
        reset_session(s)
        once = (s.current.copy(), [[m.data.copy() for m in b] for b in s.fast])
        reset_session(s)
        assert np.array_equal(once[0], s.current)
        assert all(np.array_equal(m.data, m0) for b, b0 in zip(s.fast, once[1])
                   for m, m0 in zip(b, b0))
        assert np.array_equal(stage["base"].latents, base_copy)

    def test_decoded_scene_matches_latent_count(self, stage):
        s = fresh_session(stage)
        out = decoded_scene(s)
        assert len(out) == len(stage["base"].latents)

    def test_xattn_ablation_shares_the_harness(self, stage):
        ref = TTTRefiner(np.random.default_rng(9), dim=DIM, n_blocks=2,
                         n_heads=4, mode="xattn")
        state = ref.state_dict()
        ref.load_state_dict(state)
        s = new_session(stage["base"], stage["lrm"], stage["comp"], ref)
        before = s.current.copy()
        refine(s, edit_views(stage), mode="global")
        assert not np.allclose(s.current, before)
        a = s.current.copy()
        s2 = new_session(stage["base"], stage["lrm"], stage["comp"], ref)
        refine(s2, edit_views(stage), mode="global")
        assert np.array_equal(a, s2.current)


class TestSnapshot:
    def test_roundtrip_bit_exact(self, stage, tmp_path):
        s = fresh_session(stage)
        refine(s, edit_views(stage), mode="global")
        refine(s, edit_views(stage), mode="local")
        p = tmp_path / "sess.bin"
        save_session(p, s)
        r = load_session(p, stage["base"], stage["lrm"], stage["comp"],
                         stage["refiner"])
        assert np.array_equal(r.current, s.current)
        for b1, b2 in zip(r.fast, s.fast):
            for m1, m2 in zip(b1, b2):
                assert np.array_equal(m1.data, m2.data)
        assert [(h.mode, h.n_views) for h in r.history] == \
               [(h.mode, h.n_views) for h in s.history]
        for h1, h2 in zip(r.history, s.history):
            if h1.hit_cells is None:
                assert h2.hit_cells is None
            else:
                assert np.array_equal(h1.hit_cells, h2.hit_cells)

    def test_wrong_base_rejected(self, stage, tmp_path):
        s = fresh_session(stage)
        refine(s, edit_views(stage), mode="global")
        p = tmp_path / "sess.bin"
        save_session(p, s)
        other = random_desk_scene(99, n_objects=1, gaussians_per_object=40,
                                  sh_degree=1)
        base2, _, _ = compress_asset(other, stage["lrm"], stage["comp"],
                                     res=8, n_views=3)
        with pytest.raises(ValueError, match="base"):
            load_session(p, base2, stage["lrm"], stage["comp"],
                         stage["refiner"])

    def test_bad_magic_rejected(self, stage, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_session(p, stage["base"], stage["lrm"], stage["comp"],
                         stage["refiner"])


class TestMergeLocal:
    def _local_session(self, stage):
        """Session with a local edit plus hit cells that hold scene Gaussians.

        The untrained feature model scatters occupied cells without regard to
        the real splats, so the edit's marched cells may be empty of them;
        merging is exercised on cells picked from actual splat positions
        (a strict subset, keeping the outside nonempty)."""
        from splatedit.voxels.grid import point_cells
        s = fresh_session(stage)
        views = edit_views(stage)
        refine(s, views, mode="local")
        base = s.base
        scene = stage["scene"]
        cells = point_cells(scene.positions, base.bounds_min, base.cell_size,
                            base.resolution)
        occupied = np.intersect1d(np.unique(cells), base.cell_ids)
        hits = occupied[:max(1, len(occupied) - 1)]
        return s, views, hits

    def test_region_gaussian_count_doubles(self, stage):
        s, views, hits = self._local_session(stage)
        scene = stage["scene"]
        out = merge_local(s, hits, scene, edits=views)
        m = region_size(s, hits, scene)
        assert m > 0
        assert len(out) == len(scene) + m  # region m -> 2m, outside untouched

    def test_outside_gaussians_bit_identical(self, stage):
        s, views, hits = self._local_session(stage)
        scene = stage["scene"]
        out = merge_local(s, hits, scene, edits=views)
        ridx = region_indices(s, hits, scene)
        outside = np.setdiff1d(np.arange(len(scene)), ridx)
        keep = len(outside)
        assert np.array_equal(out.positions[:keep], scene.positions[outside])
        assert np.array_equal(out.sh[:keep], scene.sh[outside])
        assert np.array_equal(out.opacity_logits[:keep],
                              scene.opacity_logits[outside])

    def test_empty_region_returns_original(self, stage):
        s, views, _ = self._local_session(stage)
        scene = stage["scene"]
        out = merge_local(s, np.array([0], dtype=np.int64), scene,
                          region=np.array([], dtype=np.int64), edits=views)
        assert out is scene

    def test_render_from_region_excluding_view_unchanged(self, stage):
        s, views, hits = self._local_session(stage)
        scene = stage["scene"]
        out = merge_local(s, hits, scene, edits=views)
        ridx = region_indices(s, hits, scene)
        pts = scene.positions[ridx]
        centroid = pts.mean(axis=0)
        span = float(np.linalg.norm(scene.bounds[1] - scene.bounds[0]))
        eye = centroid + np.array([0.0, 0.0, 4.0 * span])
        away = eye + np.array([0.0, 0.0, 4.0 * span])
        cam = camera_from_lookat(eye, away, fx=32.0, width=32, height=32)
        a = rasterize(scene, cam, RasterConfig()).color
        b = rasterize(out, cam, RasterConfig()).color
        assert np.abs(a - b).max() < 1e-6


def region_indices(session, hit_cells, scene):
    from splatedit.voxels.grid import point_cells
    base = session.base
    cells = point_cells(scene.positions, base.bounds_min, base.cell_size,
                        base.resolution)
    lat_cells = np.unique(base.cell_ids)
    ok = np.isin(cells, np.intersect1d(np.asarray(hit_cells), lat_cells))
    return np.nonzero(ok)[0]


def region_size(session, hit_cells, scene):
    return len(region_indices(session, hit_cells, scene))
