import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freeedit import tensor as T
from freeedit.geometry import (CameraPose, bilinear_sample, epipolar_samples, fourier_encode, project,
                               project_points, ray_for_pixel, rays_for_pixels, read_camera, sample_depths,
                               sample_points, sample_image, scene_bounds, write_camera)
from freeedit.rng import SplitMix64


def identity_pose(width=64, height=48, f=50.0, t=(0.0, 0.0, 0.0)):
    return CameraPose(f, f, width / 2, height / 2, np.eye(3), np.asarray(t), width, height)


def random_pose(rng: np.random.Generator, size=48):
    ang = rng.uniform(0, 2 * math.pi)
    elev = rng.uniform(0.2, 1.0)
    dist = rng.uniform(3.0, 6.0)
    eye = dist * np.array([math.cos(ang) * math.cos(elev), math.sin(ang) * math.cos(elev), math.sin(elev)])
    return CameraPose.look_at(eye, rng.uniform(-0.3, 0.3, 3), [0, 0, 1], 1.5 * size, 1.5 * size, size, size)


def normalised(uv, pose):
    return np.array([(uv[0] - pose.cx) / pose.fx, (uv[1] - pose.cy) / pose.fy, 1.0])


def line_through_ray(ray, pose):
    """Unit normal of the plane through the source centre and the target ray (normalised coords)."""
    a = pose.R @ ray.origin + pose.t
    b = pose.R @ (ray.origin + ray.direction) + pose.t
    n = np.cross(a, b)
    return n / np.linalg.norm(n[:2])


class TestCameraPose:
    def test_look_at_is_valid(self):
        pose = random_pose(np.random.default_rng(0))
        pose.validate()
        np.testing.assert_allclose(pose.R @ pose.R.T, np.eye(3), atol=1e-12)

    @pytest.mark.parametrize("kwargs", [dict(f=-1.0), dict(width=10, height=0)])
    def test_invalid_intrinsics(self, kwargs):
        with pytest.raises(T.ContractError):
            identity_pose(**kwargs).validate()

    def test_non_orthonormal_rotation(self):
        pose = identity_pose()
        pose.R = np.diag([1.0, 1.0, 1.01])
        with pytest.raises(T.ContractError):
            pose.validate()

    def test_camera_file_round_trip(self, tmp_path):
        pose = random_pose(np.random.default_rng(4))
        write_camera(tmp_path / "cam_000.txt", pose)
        back = read_camera(tmp_path / "cam_000.txt")
        np.testing.assert_array_equal(back.R, pose.R)
        np.testing.assert_array_equal(back.t, pose.t)
        assert (back.fx, back.fy, back.cx, back.cy, back.width, back.height) == \
            (pose.fx, pose.fy, pose.cx, pose.cy, pose.width, pose.height)

    def test_malformed_camera_file(self, tmp_path):
        (tmp_path / "cam.txt").write_text("1 2 3\n")
        with pytest.raises(ValueError):
            read_camera(tmp_path / "cam.txt")


class TestRays:
    def test_optical_axis(self):
        pose = identity_pose()
        ray = ray_for_pixel(pose, pose.cx - 0.5, pose.cy - 0.5)
        np.testing.assert_allclose(ray.direction, [0.0, 0.0, 1.0], atol=1e-15)

    def test_translation_only_origin(self):
        ray = ray_for_pixel(identity_pose(t=(1.0, -2.0, 0.5)), 3, 4)
        np.testing.assert_allclose(ray.origin, [-1.0, 2.0, -0.5])

    def test_unit_directions(self):
        pose = random_pose(np.random.default_rng(1))
        rays = rays_for_pixels(pose, np.arange(48), np.arange(48)[::-1])
        np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=-1), 1.0, atol=1e-9)

    @pytest.mark.parametrize("px,py", [(-0.1, 3), (64, 3), (3, 48)])
    def test_out_of_bounds_pixel(self, px, py):
        with pytest.raises(IndexError):
            ray_for_pixel(identity_pose(), px, py)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0, 47.49), st.floats(0, 47.49), st.floats(0.5, 20))
    def test_projection_round_trip(self, seed, px, py, depth):
        pose = random_pose(np.random.default_rng(seed))
        ray = ray_for_pixel(pose, px, py)
        u, v, z = project(ray.origin + depth * ray.direction, pose)
        np.testing.assert_allclose([u, v], [px + 0.5, py + 0.5], atol=1e-5)
        assert z > 0


class TestSampling:
    def test_midpoint_bins(self):
        np.testing.assert_allclose(sample_depths(0.0, 1.0, 1, 2, "midpoint"), [[0.25, 0.75]])

    def test_stratified_stays_in_bins(self):
        depths = sample_depths(2.0, 6.0, 100, 8, "stratified", SplitMix64(3))
        lower = 2.0 + 0.5 * np.arange(8)
        assert np.all(depths >= lower) and np.all(depths <= lower + 0.5)
        assert np.all(np.diff(depths, axis=-1) > 0)

    def test_same_seed_same_depths(self):
        a = sample_depths(1.0, 3.0, 4, 16, "stratified", SplitMix64(9))
        b = sample_depths(1.0, 3.0, 4, 16, "stratified", SplitMix64(9))
        np.testing.assert_array_equal(a, b)

    def test_too_few_points(self):
        with pytest.raises(T.ContractError):
            sample_depths(0.0, 1.0, 1, 1)

    def test_point_samples_spacing(self):
        ray = ray_for_pixel(identity_pose(), 10, 10, near=1.0, far=3.0)
        s = sample_points(ray, 4)
        np.testing.assert_allclose(s.depths, [1.25, 1.75, 2.25, 2.75])
        np.testing.assert_allclose(s.deltas, [0.5, 0.5, 0.5, 0.25])
        np.testing.assert_allclose(s.points, ray.origin + s.depths[:, None] * ray.direction)

    def test_scene_bounds(self):
        pose = identity_pose(t=(0.0, 0.0, 5.0))
        near, far = scene_bounds(pose, [0, 0, 0], 2.0)
        assert (near, far) == pytest.approx((5 - 2.2, 5 + 2.2))
        near, _ = scene_bounds(pose, [0, 0, 0], 10.0)
        assert near == 0.05


class TestProjection:
    def test_principal_point(self):
        pose = identity_pose()
        u, v, z = project([0.0, 0.0, 3.0], pose)
        assert (u, v, z) == (pose.cx, pose.cy, 3.0)

    def test_behind_camera(self):
        assert project([0.0, 0.0, -1.0], identity_pose()) is None

    def test_outside_image(self):
        assert project([100.0, 0.0, 1.0], identity_pose()) is None

    def test_batched_flags(self):
        _, _, valid = project_points(np.array([[0, 0, 1.0], [0, 0, -1.0], [0, 0, 1e-9]]), identity_pose())
        np.testing.assert_array_equal(valid, [True, False, False])


class TestBilinear:
    def test_nodes_are_exact(self):
        fmap = np.random.default_rng(0).normal(size=(4, 5, 2))
        out = bilinear_sample(fmap, np.array([0.0, 4.0, 2.0]), np.array([0.0, 3.0, 1.0])).data
        np.testing.assert_allclose(out, fmap[[0, 3, 1], [0, 4, 2]], rtol=1e-6)

    def test_cell_centre_is_corner_mean(self):
        fmap = np.random.default_rng(1).normal(size=(3, 3, 4))
        with T.precision(64):
            out = bilinear_sample(fmap, 1.5, 0.5).data
        np.testing.assert_allclose(out, fmap[0:2, 1:3].mean(axis=(0, 1)), rtol=1e-12)

    @given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1))
    def test_reproduces_affine_maps(self, a, b, c):
        h, w = 6, 7
        vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
        fmap = (a * uu + b * vv + c)[..., None]
        u = np.linspace(0, w - 1, 13)
        v = np.linspace(0, h - 1, 13)[::-1]
        with T.precision(64):
            out = bilinear_sample(fmap, u, v).data[:, 0]
        np.testing.assert_allclose(out, a * u + b * v + c, atol=1e-12)

    def test_clamps_to_edge(self):
        fmap = np.arange(6.0).reshape(2, 3, 1)
        out = bilinear_sample(fmap, np.array([-5.0, 10.0]), np.array([-5.0, 10.0])).data[:, 0]
        np.testing.assert_allclose(out, [0.0, 5.0])

    def test_gradient_spreads_weights(self):
        fmap = T.Tensor(np.zeros((2, 2, 1)), requires_grad=True)
        with T.precision(64):
            T.backward(bilinear_sample(fmap, 0.25, 0.5).sum())
        np.testing.assert_allclose(fmap.grad[..., 0], [[0.375, 0.125], [0.375, 0.125]])

    def test_image_lookup_uses_pixel_centres(self):
        img = np.random.default_rng(2).random((4, 4, 3))
        np.testing.assert_allclose(sample_image(img, np.array([[2.5, 1.5]])), img[1:2, 2])


class TestFourier:
    def test_zero_input(self):
        enc = fourier_encode(np.zeros(3), 10)
        assert enc.shape == (63,)
        np.testing.assert_array_equal(enc[:3], 0.0)
        blocks = enc[3:].reshape(10, 2, 3)
        np.testing.assert_array_equal(blocks[:, 0], 0.0)
        np.testing.assert_array_equal(blocks[:, 1], 1.0)

    def test_period_two(self):
        x = np.array([0.1, -0.4, 0.77])
        with T.precision(64):
            a, b = fourier_encode(x), fourier_encode(x + 2.0)
        assert not np.allclose(a[:3], b[:3])
        np.testing.assert_allclose(a[3:], b[3:], atol=1e-9)

    def test_layout(self):
        with T.precision(64):
            enc = fourier_encode(np.array([0.25]), 2)
        np.testing.assert_allclose(enc, [0.25, math.sin(math.pi / 4), math.cos(math.pi / 4),
                                         math.sin(math.pi / 2), math.cos(math.pi / 2)], atol=1e-15)


class TestEpipolar:
    def test_single_sample_is_projection(self):
        rng = np.random.default_rng(0)
        target, source = random_pose(rng), random_pose(rng)
        ray = ray_for_pixel(target, 20, 25)
        x = ray.origin + 5.0 * ray.direction
        uv, valid, _ = epipolar_samples(x[None], ray.direction[None], source, 1, 2.0)
        u, v, _ = project(x, source)
        np.testing.assert_allclose(uv[0, 0], [u, v])
        assert valid[0, 0]

    def test_samples_are_spaced_along_the_line(self):
        rng = np.random.default_rng(1)
        target, source = random_pose(rng), random_pose(rng)
        ray = ray_for_pixel(target, 24, 24)
        x = ray.origin + 4.5 * ray.direction
        uv, _, offsets = epipolar_samples(x[None], ray.direction[None], source, 5, 2.0)
        np.testing.assert_allclose(offsets, [-2, -1, 0, 1, 2])
        np.testing.assert_allclose(np.linalg.norm(np.diff(uv[0], axis=0), axis=-1), 1.0, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_samples_lie_on_projected_ray(self, seed):
        rng = np.random.default_rng(seed)
        target, source = random_pose(rng), random_pose(rng)
        ray = ray_for_pixel(target, rng.uniform(0, 48), rng.uniform(0, 48))
        x = ray.origin + rng.uniform(3, 7) * ray.direction
        uv, _, _ = epipolar_samples(x[None], ray.direction[None], source, 5, 2.0)
        line = line_through_ray(ray, source)
        for s in uv[0]:
            assert abs(line @ normalised(s, source)) < 1e-6

    def test_same_camera_collapses_to_pixel(self):
        pose = random_pose(np.random.default_rng(2))
        ray = ray_for_pixel(pose, 10, 30)
        x = ray.origin + 5.0 * ray.direction
        uv, _, _ = epipolar_samples(x[None], ray.direction[None], pose, 5, 2.0)
        np.testing.assert_allclose(uv[0, 2], [10.5, 30.5], atol=1e-9)

    def test_out_of_view_centre_invalidates_all(self):
        pose = identity_pose()
        uv, valid, _ = epipolar_samples(np.array([[0.0, 0.0, -2.0]]), np.array([[0.0, 0.0, 1.0]]), pose, 5, 2.0)
        assert not valid.any()

    @pytest.mark.parametrize("n,window", [(4, 2.0), (0, 2.0), (3, 0.0)])
    def test_bad_arguments(self, n, window):
        with pytest.raises(T.ContractError):
            epipolar_samples(np.zeros((1, 3)), np.array([[0, 0, 1.0]]), identity_pose(), n, window)
