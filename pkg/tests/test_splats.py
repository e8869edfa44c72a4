"""Splat data model: SH decode, quaternions, ply interchange, synth assets."""

import numpy as np
import pytest

from splatedit.splats import (Camera, PlyFormatError, PlyParseError,
                              PrimitiveSpec, SplatScene, camera_from_lookat,
                              eval_sh_color, eval_sh_colors, load_ply, logit,
                              n_coeffs, quat_to_rotmat, random_desk_scene,
                              save_ply, sh_basis, sh_basis_grad, synth_scene)


def _random_scene(rng, n, deg=3):
    return SplatScene(
        rng.uniform(-1, 1, (n, 3)),
        rng.uniform(-4, -2, (n, 3)),
        rng.standard_normal((n, 4)),
        rng.uniform(-2, 2, n),
        rng.standard_normal((n, 3, n_coeffs(deg))) * 0.3,
    )


class TestSH:
    def test_all_zero_coeffs_gives_gray(self):
        sh = np.zeros((3, 16))
        assert np.allclose(eval_sh_color(sh, [0.0, 0.0, 1.0]), [0.5, 0.5, 0.5])

    def test_dc_only_hand_value(self):
        # Y00 * 1 + 0.5 = 0.7820947918
        sh = np.zeros((3, 16))
        sh[:, 0] = 1.0
        got = eval_sh_color(sh, [0.0, 0.0, 1.0])
        assert np.allclose(got, 0.5 + 0.2820947918, atol=1e-9)

    def test_degree1_matches_polynomial_table_at_plus_z(self):
        # independent hand-written degree-1 real SH table
        def oracle(sh, d):
            x, y, z = d
            y00 = 0.28209479177387814
            y1 = 0.4886025119029199
            basis = [y00, -y1 * y, y1 * z, -y1 * x]
            return 0.5 + np.asarray(sh)[:, :4] @ np.asarray(basis)

        rng = np.random.default_rng(0)
        sh = rng.standard_normal((3, 4))
        d = np.array([0.0, 0.0, 1.0])
        assert np.allclose(eval_sh_color(sh, d), oracle(sh, d), atol=1e-12)

    def test_degree0_is_view_independent(self):
        rng = np.random.default_rng(1)
        sh = rng.standard_normal((3, 1))
        dirs = rng.standard_normal((50, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        cols = [eval_sh_color(sh, d) for d in dirs]
        assert np.ptp(np.asarray(cols), axis=0).max() < 1e-12

    def test_batch_matches_single(self):
        rng = np.random.default_rng(2)
        sh = rng.standard_normal((5, 3, 16))
        dirs = rng.standard_normal((5, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        batch = eval_sh_colors(sh, dirs)
        for i in range(5):
            assert np.allclose(batch[i], eval_sh_color(sh[i], dirs[i]))

    def test_degree_overflow_rejected(self):
        with pytest.raises(ValueError):
            eval_sh_color(np.zeros((3, 4)), [0, 0, 1], degree=2)

    @pytest.mark.parametrize("degree", [1, 2, 3, 4])
    def test_basis_grad_matches_fd(self, degree):
        rng = np.random.default_rng(degree)
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        g = sh_basis_grad(d, degree)
        eps = 1e-6
        for ax in range(3):
            dp, dm = d.copy(), d.copy()
            dp[ax] += eps
            dm[ax] -= eps
            fd = (sh_basis(dp, degree) - sh_basis(dm, degree)) / (2 * eps)
            assert np.max(np.abs(g[:, ax] - fd)) < 1e-6


class TestQuat:
    def test_identity(self):
        assert np.allclose(quat_to_rotmat([1, 0, 0, 0]), np.eye(3))

    def test_x_flip_hand_expansion(self):
        assert np.allclose(quat_to_rotmat([0, 1, 0, 0]), np.diag([1.0, -1.0, -1.0]))

    def test_orthonormal_property_1000(self):
        rng = np.random.default_rng(3)
        q = rng.standard_normal((1000, 4))
        R = quat_to_rotmat(q)
        err = np.abs(np.einsum("nij,nkj->nik", R, R) - np.eye(3))
        assert err.max() < 1e-6
        assert np.allclose(np.linalg.det(R), 1.0, atol=1e-6)

    def test_zero_quaternion_rejected(self):
        with pytest.raises(ValueError):
            quat_to_rotmat([0.0, 0.0, 0.0, 0.0])

    def test_unnormalized_input_normalized_first(self):
        assert np.allclose(quat_to_rotmat([2, 0, 0, 0]), np.eye(3))


class TestSceneModel:
    def test_invariants_on_random_scene(self):
        s = _random_scene(np.random.default_rng(0), 50)
        assert np.all(s.scales() > 0)
        assert np.all((s.opacities() > 0) & (s.opacities() < 1))
        n = np.linalg.norm(quat_to_rotmat(s.rotations) @ [0, 0, 1.0], axis=-1)
        assert np.allclose(n, 1.0, atol=1e-6)

    def test_bounds_contain_positions(self):
        s = _random_scene(np.random.default_rng(1), 30)
        lo, hi = s.bounds
        assert np.all(s.positions >= lo - 1e-6) and np.all(s.positions <= hi + 1e-6)

    def test_explicit_bounds_validated(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ValueError):
            SplatScene(rng.uniform(2, 3, (4, 3)), np.zeros((4, 3)),
                       np.tile([1, 0, 0, 0.0], (4, 1)), np.zeros(4),
                       np.zeros((4, 3, 1)), bounds=([0, 0, 0], [1, 1, 1]))

    def test_sh_count_must_be_square(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ValueError):
            SplatScene(rng.uniform(-1, 1, (4, 3)), np.zeros((4, 3)),
                       np.tile([1, 0, 0, 0.0], (4, 1)), np.zeros(4),
                       np.zeros((4, 3, 7)))

    def test_scene_is_immutable(self):
        s = _random_scene(np.random.default_rng(4), 5)
        with pytest.raises(ValueError):
            s.positions[0, 0] = 99.0

    def test_covariance_matches_definition(self):
        s = _random_scene(np.random.default_rng(5), 8)
        g = s[3]
        want = g.rotmat @ np.diag(g.scale ** 2) @ g.rotmat.T
        assert np.allclose(s.covariances()[3], want, atol=1e-6)

    def test_subset_and_concat(self):
        s = _random_scene(np.random.default_rng(6), 10)
        a, b = s.subset(np.arange(4)), s.subset(np.arange(4, 10))
        back = SplatScene.concatenate([a, b])
        assert np.array_equal(back.positions, s.positions)
        assert np.array_equal(back.sh, s.sh)


class TestCamera:
    def test_lookat_projects_target_to_center(self):
        cam = camera_from_lookat([0, 0, -2], [0, 0, 0], fx=100, width=64, height=48)
        px, z = cam.project(np.array([[0.0, 0.0, 0.0]]))
        assert np.allclose(px[0], [32, 24])
        assert np.isclose(z[0], 2.0)

    def test_rotation_validated(self):
        bad = np.eye(4)
        bad[0, 1] = 0.5
        with pytest.raises(ValueError):
            Camera(bad, 50, 50, 16, 16, 32, 32)

    def test_min_image_size(self):
        with pytest.raises(ValueError):
            Camera(np.eye(4), 50, 50, 0, 0, 0, 32)

    def test_cam_position_roundtrip(self):
        cam = camera_from_lookat([1.0, 2.0, 3.0], [0, 0, 0], fx=60, width=32, height=32)
        assert np.allclose(cam.cam_position(), [1, 2, 3], atol=1e-9)
        assert np.allclose(cam.to_cam(cam.cam_position()[None]), 0, atol=1e-9)


class TestPly:
    def test_roundtrip_bit_exact(self, tmp_path):
        s = _random_scene(np.random.default_rng(7), 100)
        p = tmp_path / "scene.ply"
        save_ply(s, p)
        back = load_ply(p)
        for attr in ("positions", "log_scales", "rotations", "opacity_logits", "sh"):
            assert getattr(back, attr).tobytes() == getattr(s, attr).tobytes(), attr

    def test_degree3_exposes_45_f_rest(self, tmp_path):
        s = _random_scene(np.random.default_rng(8), 3)
        p = tmp_path / "scene.ply"
        save_ply(s, p)
        header = p.read_bytes().split(b"end_header")[0].decode()
        assert header.count("f_rest_") == 45
        assert "property float f_rest_44" in header

    def test_property_order_fixed(self, tmp_path):
        s = _random_scene(np.random.default_rng(9), 2)
        p = tmp_path / "scene.ply"
        save_ply(s, p)
        names = [ln.split()[-1] for ln in p.read_bytes().split(b"end_header")[0]
                 .decode().splitlines() if ln.startswith("property")]
        assert names[:6] == ["x", "y", "z", "nx", "ny", "nz"]
        assert names[6:9] == ["f_dc_0", "f_dc_1", "f_dc_2"]
        assert names[-8] == "opacity"
        assert names[-7:] == ["scale_0", "scale_1", "scale_2",
                              "rot_0", "rot_1", "rot_2", "rot_3"]

    def test_missing_opacity_named_in_error(self, tmp_path):
        s = _random_scene(np.random.default_rng(10), 2)
        p = tmp_path / "scene.ply"
        save_ply(s, p)
        blob = p.read_bytes().replace(b"property float opacity\n", b"")
        bad = tmp_path / "bad.ply"
        bad.write_bytes(blob)
        with pytest.raises(PlyFormatError, match="opacity"):
            load_ply(bad)

    def test_malformed_header_reports_offset(self, tmp_path):
        p = tmp_path / "junk.ply"
        p.write_bytes(b"ply\nformat ascii 1.0\nend_header\n")
        with pytest.raises(PlyParseError, match=r"byte \d+"):
            load_ply(p)

    def test_truncated_payload_rejected(self, tmp_path):
        s = _random_scene(np.random.default_rng(11), 4)
        p = tmp_path / "scene.ply"
        save_ply(s, p)
        blob = p.read_bytes()
        bad = tmp_path / "cut.ply"
        bad.write_bytes(blob[:-10])
        with pytest.raises(PlyParseError, match="truncated"):
            load_ply(bad)


class TestSynth:
    def test_same_seed_identical(self):
        spec = PrimitiveSpec(kind="sphere", n=50)
        a = synth_scene(spec, 42)
        b = synth_scene(spec, 42)
        assert a.positions.tobytes() == b.positions.tobytes()
        assert a.sh.tobytes() == b.sh.tobytes()

    def test_different_seed_differs(self):
        spec = PrimitiveSpec(kind="sphere", n=50)
        assert not np.array_equal(synth_scene(spec, 1).positions,
                                  synth_scene(spec, 2).positions)

    def test_sphere_positions_within_radius_bound(self):
        r = 0.4
        spec = PrimitiveSpec(kind="sphere", size=(r, r, r), center=(0.1, -0.2, 0.3), n=300)
        s = synth_scene(spec, 5)
        d = np.linalg.norm(s.positions - np.array([0.1, -0.2, 0.3], np.float32), axis=1)
        assert np.all(d <= r + 3 * s.scales().max() + 1e-6)

    def test_fuzz_invariants_1000_seeds(self):
        for seed in range(1000):
            s = synth_scene(PrimitiveSpec(kind="box", n=8, texture="checker"), seed)
            assert np.all(np.isfinite(s.positions))
            assert np.all(s.scales() > 0)
            assert np.all((s.opacities() > 0) & (s.opacities() < 1))
            assert np.allclose(np.linalg.norm(s.rotations, axis=1), 1.0, atol=1e-5)

    def test_desk_scene_composition(self):
        s = random_desk_scene(0, n_objects=2, gaussians_per_object=40)
        assert len(s) > 80
        assert s.sh.shape[-1] == 16

    def test_stripes_alternate_along_axis(self):
        spec = PrimitiveSpec(kind="plane", size=(0.5, 0.0, 0.5), texture="stripes",
                             period=0.25, axis=0, n=2000,
                             color_a=(1, 0, 0), color_b=(0, 0, 1))
        s = synth_scene(spec, 3)
        from splatedit.splats.sh import dc_to_rgb
        rgb = dc_to_rgb(s.sh[:, :, 0])
        x = s.positions[:, 0]
        red = rgb[:, 0] > 0.9
        # points 0.125 apart along x (half a period) flip color
        k = np.floor(x / 0.125).astype(int)
        assert np.all(red == (k % 2 == 0))
