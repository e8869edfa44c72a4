"""Rasterizer: compositing semantics, oracle agreement, analytic gradients."""

import numpy as np
import pytest

import splatedit.tensor as T
from splatedit.render import (RasterConfig, RenderError, project, rasterize,
                              rasterize_backward, rasterize_tensors,
                              render_views)
from splatedit.render.raster import _forward
from splatedit.render.image_io import load_f32, load_png, save_f32, save_png
from splatedit.splats import (PrimitiveSpec, SplatScene, camera_from_lookat,
                              logit, rgb_to_dc, synth_scene)

from oracles import brute_force_render, fd_grad, rel_err


def make_cam(width=32, height=32, fx=40.0, z=2.5):
    return camera_from_lookat([0, 0, -z], [0, 0, 0], fx=fx, width=width, height=height)


def scene_of(positions, colors, opacities, log_scale=-2.0, sh_extra=0, rng=None):
    n = len(positions)
    m = (1 + sh_extra)
    sh = np.zeros((n, 3, m * m if sh_extra else 1))
    sh[:, :, 0] = rgb_to_dc(colors)
    if sh_extra and rng is not None:
        sh[:, :, 1:] = rng.normal(0, 0.1, sh[:, :, 1:].shape)
    quats = np.tile([1.0, 0, 0, 0], (n, 1))
    if rng is not None:
        quats = rng.standard_normal((n, 4))
    return SplatScene(positions, np.full((n, 3), log_scale), quats,
                      logit(np.asarray(opacities)), sh)


def random_scene(rng, n, sh_m=16, spread=0.5, op_range=(0.3, 0.8)):
    sh = np.zeros((n, 3, sh_m))
    sh[:, :, 0] = rng.uniform(-1.0, 1.5, (n, 3))
    if sh_m > 1:
        sh[:, :, 1:] = rng.normal(0, 0.15, (n, 3, sh_m - 1))
    return SplatScene(
        rng.uniform(-spread, spread, (n, 3)),
        rng.uniform(-2.6, -1.8, (n, 3)),
        rng.standard_normal((n, 4)),
        logit(rng.uniform(*op_range, n)),
        sh)


class TestProject:
    def test_on_axis_maps_to_principal_point(self):
        cam = make_cam()
        s = scene_of(np.array([[0.0, 0, 0]]), [[0.9, 0.1, 0.1]], [0.5])
        pg = project(s[0], cam)
        assert np.allclose(pg.mean2d, [cam.cx, cam.cy], atol=1e-9)
        assert np.isclose(pg.depth, 2.5)

    def test_isotropic_gaussian_projects_isotropically_at_center(self):
        cam = make_cam()
        s = scene_of(np.array([[0.0, 0, 0]]), [[0.5, 0.5, 0.5]], [0.5])
        pg = project(s[0], cam)
        assert abs(pg.cov2d[0, 0] - pg.cov2d[1, 1]) < 1e-6
        assert abs(pg.cov2d[0, 1]) < 1e-6

    def test_behind_camera_is_culled(self):
        cam = make_cam(z=2.5)
        s = scene_of(np.array([[0.0, 0, -5.0]]), [[1, 0, 0]], [0.5])
        assert project(s[0], cam) is None

    def test_mean2d_position_jacobian_matches_fd(self):
        cam = make_cam()
        rng = np.random.default_rng(0)
        p0 = np.array([0.21, -0.13, 0.17])
        s = scene_of(p0[None], [[0.5, 0.5, 0.5]], [0.5])
        g = s[0]

        # analytic: d(mean2d)/dp = J @ R_cam, with J the perspective jacobian
        t = cam.to_cam(p0[None])[0]
        J = np.array([[cam.fx / t[2], 0, -cam.fx * t[0] / t[2] ** 2],
                      [0, cam.fy / t[2], -cam.fy * t[1] / t[2] ** 2]])
        analytic = J @ cam.R

        eps = 1e-6
        for ax in range(3):
            dp = np.zeros(3)
            dp[ax] = eps
            hi = project(type(g)(g.position + dp, g.log_scale, g.rotation,
                                  g.opacity_logit, g.sh), cam).mean2d
            lo = project(type(g)(g.position - dp, g.log_scale, g.rotation,
                                  g.opacity_logit, g.sh), cam).mean2d
            fd = (hi - lo) / (2 * eps)
            assert rel_err(analytic[:, ax], fd) < 1e-4


class TestCompositing:
    def test_single_gaussian_center_alpha_equals_opacity(self):
        cam = make_cam()
        op = 0.6180339887
        s = scene_of(np.array([[0.0, 0, 0]]), [[1, 0, 0]], [op])
        out = rasterize(s, cam)
        # principal point (16, 16) is exactly pixel (16, 16)'s sample
        assert np.isclose(out.alpha[16, 16], op, atol=1e-9)

    def test_two_aligned_gaussians_follow_compositing_formula(self):
        cam = make_cam(z=3.0)
        a1, a2 = 0.55, 0.4
        c1 = np.array([0.9, 0.2, 0.1])
        c2 = np.array([0.1, 0.3, 0.8])
        bg = (0.2, 0.25, 0.3)
        s = scene_of(np.array([[0, 0, -0.5], [0, 0, 0.5]]), [c1, c2], [a1, a2])
        out = rasterize(s, cam, RasterConfig(background=bg))
        want = a1 * c1 + (1 - a1) * a2 * c2 + (1 - a1) * (1 - a2) * np.asarray(bg)
        assert np.allclose(out.color[16, 16], want, atol=1e-9)

    def test_matches_brute_force_oracle_20_gaussians(self):
        cam = make_cam()
        scene = random_scene(np.random.default_rng(4), 20)
        cfg = RasterConfig()
        out = rasterize(scene, cam, cfg)
        oc, oa, od = brute_force_render(scene, cam, cfg)
        assert np.max(np.abs(out.color - oc)) < 1e-6
        assert np.max(np.abs(out.alpha - oa)) < 1e-6
        assert np.max(np.abs(out.depth - od)) < 1e-6

    def test_oracle_agreement_with_nontrivial_background(self):
        cam = make_cam(width=24, height=20)
        scene = random_scene(np.random.default_rng(5), 12)
        cfg = RasterConfig(background=(0.4, 0.1, 0.6))
        out = rasterize(scene, cam, cfg)
        oc, _, _ = brute_force_render(scene, cam, cfg)
        assert np.max(np.abs(out.color - oc)) < 1e-6

    def test_tile_size_invariance(self):
        cam = make_cam(width=48, height=40)
        scene = random_scene(np.random.default_rng(6), 40)
        outs = [rasterize(scene, cam, RasterConfig(tile_size=ts)) for ts in (8, 16, 32)]
        for o in outs[1:]:
            assert np.max(np.abs(o.color - outs[0].color)) < 1e-6
            assert np.max(np.abs(o.alpha - outs[0].alpha)) < 1e-6

    def test_empty_scene_renders_background(self):
        cam = make_cam()
        empty = SplatScene(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)),
                           np.zeros(0), np.zeros((0, 3, 16)))
        out = rasterize(empty, cam, RasterConfig(background=(0.3, 0.6, 0.9)))
        assert np.allclose(out.color, [0.3, 0.6, 0.9])
        assert np.all(out.alpha == 0)
        assert np.all(out.contrib_count == 0)

    def test_alpha_monotone_in_opacity(self):
        cam = make_cam()
        cfg = RasterConfig(t_stop=0.0)  # exact monotonicity needs no early stop
        rng = np.random.default_rng(7)
        scene = random_scene(rng, 15)
        base = rasterize(scene, cam, cfg).alpha
        for j in (0, 7, 14):
            lop = scene.opacity_logits.copy()
            lop[j] += 1.0
            bumped = rasterize(scene.replace(opacity_logits=lop), cam, cfg).alpha
            assert np.all(bumped >= base - 1e-12)

    def test_alpha_near_monotone_with_early_stop(self):
        cam = make_cam()
        cfg = RasterConfig()
        scene = random_scene(np.random.default_rng(8), 25, op_range=(0.5, 0.95))
        base = rasterize(scene, cam, cfg).alpha
        lop = scene.opacity_logits.copy()
        lop[3] += 2.0
        bumped = rasterize(scene.replace(opacity_logits=lop), cam, cfg).alpha
        assert np.all(bumped >= base - cfg.t_stop)

    def test_depth_at_least_near_where_visible(self):
        cam = make_cam()
        scene = random_scene(np.random.default_rng(9), 10)
        out = rasterize(scene, cam)
        cfg = RasterConfig()
        assert np.all(out.depth[out.alpha > 0] >= cfg.near)

    def test_nonfinite_attribute_names_index(self):
        cam = make_cam()
        scene = random_scene(np.random.default_rng(10), 5)
        pos = scene.positions.copy()
        pos[3, 1] = np.nan
        with pytest.raises(RenderError, match="index 3"):
            rasterize(scene.replace(positions=pos), cam)

    def test_render_views_matches_sequential(self):
        scene = random_scene(np.random.default_rng(11), 8)
        cams = [make_cam(), make_cam(z=3.0), make_cam(fx=55.0)]
        batch = render_views(scene, cams)
        for cam, out in zip(cams, batch):
            single = rasterize(scene, cam)
            assert np.array_equal(out.color, single.color)

    def test_determinism_across_runs(self):
        scene = random_scene(np.random.default_rng(12), 30)
        cam = make_cam(width=40, height=40)
        a = rasterize(scene, cam)
        b = rasterize(scene, cam)
        assert a.color.tobytes() == b.color.tobytes()


class TestBackward:
    def _fd_setup(self, n=6, seed=13, width=24, height=24, sh_m=16):
        rng = np.random.default_rng(seed)
        cam = make_cam(width=width, height=height, fx=30.0)
        scene = random_scene(rng, n, sh_m=sh_m, op_range=(0.3, 0.7))
        cfg = RasterConfig().exact()
        wimg = rng.standard_normal((height, width, 3))
        return cam, scene, cfg, wimg

    def _loss_np(self, arrays, cam, cfg, wimg):
        out, _ = _forward(*arrays, cam, cfg)
        return float((out.color * wimg).sum())

    def test_fd_all_attribute_classes(self):
        cam, scene, cfg, wimg = self._fd_setup()
        arrays = [scene.positions.astype(np.float64),
                  scene.log_scales.astype(np.float64),
                  scene.rotations.astype(np.float64),
                  scene.opacity_logits.astype(np.float64),
                  scene.sh.astype(np.float64)]

        # preconditions: no alpha clamp, comfortable transmittance floor
        out, ctx = _forward(*arrays, cam, cfg)
        assert out.alpha.max() < 0.995
        tens = [T.Tensor(a, requires_grad=True) for a in arrays]
        color, _ = rasterize_tensors(*tens, cam, cfg)
        loss = (color * T.Tensor(wimg)).sum()
        loss.backward()

        def f(i):
            def g(x):
                a2 = list(arrays)
                a2[i] = x
                return self._loss_np(a2, cam, cfg, wimg)
            return g

        tols = {0: 1e-3, 1: 1e-3, 2: 1e-3, 3: 1e-4, 4: 1e-4}
        names = ["positions", "log_scales", "rotations", "opacity_logits", "sh"]
        for i, (t, name) in enumerate(zip(tens, names)):
            want = fd_grad(f(i), [arrays[i]], eps=1e-5)[0]
            err = rel_err(t.grad, want)
            assert err < tols[i], f"{name}: rel err {err}"

    def test_zero_grad_color_gives_zero_grads(self):
        cam, scene, cfg, _ = self._fd_setup(n=4, seed=14)
        arrays = [scene.positions, scene.log_scales, scene.rotations,
                  scene.opacity_logits, scene.sh]
        _, ctx = _forward(*[a.astype(np.float64) for a in arrays], cam, cfg)
        g = rasterize_backward(ctx, np.zeros((cam.height, cam.width, 3)))
        for v in g.values():
            assert np.all(v == 0)

    def test_backward_without_forward_context_rejected(self):
        with pytest.raises(RuntimeError, match="context"):
            rasterize_backward(None, np.zeros((4, 4, 3)))

    def test_occluded_gaussian_grad_attenuated(self):
        cam = make_cam()
        # front: huge, nearly opaque (alpha clamps at 0.999 across the image)
        positions = np.array([[0.0, 0, -0.8], [0.0, 0, 0.5]])
        sh = np.zeros((2, 3, 1))
        sh[:, :, 0] = rgb_to_dc([[0.9, 0.4, 0.2], [0.2, 0.5, 0.9]])
        scene = SplatScene(positions, np.array([[3.5, 3.5, 3.5], [-1.0, -1.0, -1.0]]),
                           np.tile([1.0, 0, 0, 0], (2, 1)),
                           np.array([12.0, 1.0]), sh)
        arrays = [scene.positions.astype(np.float64),
                  scene.log_scales.astype(np.float64),
                  scene.rotations.astype(np.float64),
                  scene.opacity_logits.astype(np.float64),
                  scene.sh.astype(np.float64)]
        out, ctx = _forward(*arrays, cam, RasterConfig())
        assert out.alpha.min() >= 0.999 - 1e-9  # front splat saturates everywhere
        g = rasterize_backward(ctx, np.ones((cam.height, cam.width, 3)))

        def mag(i):
            return np.sqrt(sum(np.sum(np.asarray(v[i]) ** 2) for v in g.values()))

        assert mag(1) < 1e-3 * mag(0)

    def test_grad_flows_only_from_covered_pixels(self):
        cam = make_cam()
        s = scene_of(np.array([[0.0, 0, 0]]), [[0.9, 0.1, 0.1]], [0.6])
        arrays = [s.positions.astype(np.float64), s.log_scales.astype(np.float64),
                  s.rotations.astype(np.float64), s.opacity_logits.astype(np.float64),
                  s.sh.astype(np.float64)]
        _, ctx = _forward(*arrays, cam, RasterConfig())
        gimg = np.zeros((32, 32, 3))
        gimg[0, 0] = 1.0  # far corner, outside the splat's support
        g = rasterize_backward(ctx, gimg)
        assert np.all(g["sh"] == 0)


class TestSynthRenderChecks:
    def test_checker_autocorrelation_peaks_at_period(self):
        # plane z=0 (normal +y) viewed from above; world period 0.5 maps to
        # 0.5 * fx / dist = 16 px
        spec = PrimitiveSpec(kind="plane", center=(0, 0, 0), size=(1.2, 0.0, 1.2),
                             texture="checker", period=0.5, n=6000,
                             color_a=(0.95, 0.95, 0.95), color_b=(0.05, 0.05, 0.05))
        scene = synth_scene(spec, 21)
        cam = camera_from_lookat([0, 2.0, 1e-4], [0, 0, 0], fx=64.0,
                                 width=64, height=64)
        out = rasterize(scene, cam)
        sig = out.color[:, :, 1].mean(axis=0)
        sig = sig - sig.mean()
        ac = np.correlate(sig, sig, mode="full")[len(sig) - 1:]
        lag = 4 + int(np.argmax(ac[4:30]))
        assert abs(lag - 16) <= 1, f"autocorrelation peak at {lag}px, wanted 16px"


class TestImageIO:
    def test_png_roundtrip_within_quantization(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, (16, 20, 3))
        p = tmp_path / "img.png"
        save_png(img, p)
        back = load_png(p)
        assert back.shape == img.shape
        assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-9

    def test_f32_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(2)
        img = rng.standard_normal((7, 9, 3)).astype(np.float32)
        p = tmp_path / "img.f32"
        save_f32(img, p)
        back = load_f32(p)
        assert back.tobytes() == img.tobytes()
